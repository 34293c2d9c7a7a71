//! Jump-probability environments, reversible product-measure profiles and
//! regime classification.
//!
//! An [`Environment`] holds `p_i` for every site of a closed integer window.
//! The left-jump probability is always derived as `q_i = 1 - p_i`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::rng::{self, Domain};
use crate::series::{self, logistic, softplus};

/// Fewest sites accepted by [`classify`].
pub const MIN_CLASSIFY_SPAN: usize = 16;
/// Default partial-sum threshold of [`classify`].
pub const DEFAULT_TAIL_THRESHOLD: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("probability {value} at site {site} is outside (0, 1)")]
    ProbabilityOutOfRange { site: i64, value: f64 },
    #[error("empty window: hi {hi} < lo {lo}")]
    EmptyWindow { lo: i64, hi: i64 },
    #[error("parameter {name} = {value} is outside (0, 1)")]
    ParameterOutOfRange { name: &'static str, value: f64 },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("site {site} is outside the window [{lo}, {hi}]")]
    SiteOutsideWindow { site: i64, lo: i64, hi: i64 },
    #[error("pi0 must be positive and finite, got {0}")]
    InvalidPi0(f64),
    #[error("pi overflows at site {site} (log pi = {log_pi})")]
    PiOverflow { site: i64, log_pi: f64 },
    #[error("classification needs at least {MIN_CLASSIFY_SPAN} sites, got {0}")]
    InsufficientSpan(usize),
    #[error("malformed environment record at line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

fn check_open_unit(name: &'static str, value: f64) -> Result<(), EnvError> {
    if value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(EnvError::ParameterOutOfRange { name, value })
    }
}

/// Law of a single `p_i` in an i.i.d. environment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DistSpec {
    /// `a` with probability `prob_a`, otherwise `b`.
    TwoPoint { a: f64, b: f64, prob_a: f64 },
    /// Uniform on `[lo, hi]`.
    Uniform { lo: f64, hi: f64 },
}

impl DistSpec {
    pub fn two_point(a: f64, b: f64, prob_a: f64) -> Result<Self, EnvError> {
        let d = DistSpec::TwoPoint { a, b, prob_a };
        d.validate()?;
        Ok(d)
    }

    pub fn uniform(lo: f64, hi: f64) -> Result<Self, EnvError> {
        let d = DistSpec::Uniform { lo, hi };
        d.validate()?;
        Ok(d)
    }

    /// Support must sit strictly inside (0, 1).
    pub fn validate(&self) -> Result<(), EnvError> {
        match *self {
            DistSpec::TwoPoint { a, b, prob_a } => {
                check_open_unit("a", a)?;
                check_open_unit("b", b)?;
                if !(0.0..=1.0).contains(&prob_a) {
                    return Err(EnvError::InvalidDistribution(format!(
                        "two-point weight {prob_a} is not a probability"
                    )));
                }
                Ok(())
            }
            DistSpec::Uniform { lo, hi } => {
                check_open_unit("lo", lo)?;
                check_open_unit("hi", hi)?;
                if lo > hi {
                    return Err(EnvError::InvalidDistribution(format!(
                        "uniform bounds reversed: {lo} > {hi}"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            DistSpec::TwoPoint { a, b, prob_a } => {
                if rng.gen::<f64>() < prob_a {
                    a
                } else {
                    b
                }
            }
            DistSpec::Uniform { lo, hi } => lo + (hi - lo) * rng.gen::<f64>(),
        }
    }
}

impl fmt::Display for DistSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DistSpec::TwoPoint { a, b, prob_a } => write!(f, "twopoint(a={a},b={b},r={prob_a})"),
            DistSpec::Uniform { lo, hi } => write!(f, "uniform(a={lo},b={hi})"),
        }
    }
}

/// Split `name(args)` into the name and the top-level comma separated args.
fn split_call(s: &str) -> Option<(&str, Vec<&str>)> {
    let s = s.trim();
    let open = s.find('(')?;
    if !s.ends_with(')') {
        return None;
    }
    let name = &s[..open];
    let inner = &s[open + 1..s.len() - 1];
    let mut args = Vec::new();
    let mut depth = 0usize;
    let mut start = 0;
    for (i, c) in inner.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth = depth.checked_sub(1)?,
            ',' if depth == 0 => {
                args.push(inner[start..i].trim());
                start = i + 1;
            }
            _ => {}
        }
    }
    if depth != 0 {
        return None;
    }
    if !inner.trim().is_empty() {
        args.push(inner[start..].trim());
    }
    Some((name.trim(), args))
}

fn keyed<'a>(args: &[&'a str], key: &str) -> Result<&'a str, EnvError> {
    args.iter()
        .find_map(|a| {
            let (k, v) = a.split_once('=')?;
            (k.trim() == key).then_some(v.trim())
        })
        .ok_or_else(|| EnvError::InvalidDistribution(format!("missing `{key}`")))
}

fn keyed_f64(args: &[&str], key: &str) -> Result<f64, EnvError> {
    let v = keyed(args, key)?;
    v.parse()
        .map_err(|_| EnvError::InvalidDistribution(format!("`{key}` = {v} is not a number")))
}

impl FromStr for DistSpec {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, args) = split_call(s)
            .ok_or_else(|| EnvError::InvalidDistribution(format!("cannot parse `{s}`")))?;
        match name {
            "twopoint" => DistSpec::two_point(
                keyed_f64(&args, "a")?,
                keyed_f64(&args, "b")?,
                keyed_f64(&args, "r")?,
            ),
            "uniform" => DistSpec::uniform(keyed_f64(&args, "a")?, keyed_f64(&args, "b")?),
            other => Err(EnvError::InvalidDistribution(format!(
                "unknown family `{other}`"
            ))),
        }
    }
}

/// How an environment was produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Source {
    Deterministic,
    Periodic { alpha: f64, beta: f64 },
    Iid { dist: DistSpec, seed: u64 },
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Deterministic => f.write_str("deterministic"),
            Source::Periodic { alpha, beta } => write!(f, "periodic(alpha={alpha},beta={beta})"),
            Source::Iid { dist, seed } => write!(f, "iid({dist},seed={seed})"),
        }
    }
}

impl FromStr for Source {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "deterministic" {
            return Ok(Source::Deterministic);
        }
        let (name, args) = split_call(s)
            .ok_or_else(|| EnvError::InvalidDistribution(format!("cannot parse source `{s}`")))?;
        match name {
            "periodic" => Ok(Source::Periodic {
                alpha: keyed_f64(&args, "alpha")?,
                beta: keyed_f64(&args, "beta")?,
            }),
            "iid" => {
                let dist = args
                    .first()
                    .ok_or_else(|| EnvError::InvalidDistribution("iid without law".into()))?
                    .parse()?;
                let seed = keyed(&args, "seed")?;
                let seed = seed.parse().map_err(|_| {
                    EnvError::InvalidDistribution(format!("seed `{seed}` is not an integer"))
                })?;
                Ok(Source::Iid { dist, seed })
            }
            other => Err(EnvError::InvalidDistribution(format!(
                "unknown source `{other}`"
            ))),
        }
    }
}

/// Jump-right probabilities `p_i` over the closed window `[lo, hi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    lo: i64,
    probs: Vec<f64>,
    source: Source,
}

impl Environment {
    pub fn new(lo: i64, probs: Vec<f64>, source: Source) -> Result<Self, EnvError> {
        if probs.is_empty() {
            return Err(EnvError::EmptyWindow { lo, hi: lo - 1 });
        }
        for (k, &p) in probs.iter().enumerate() {
            if !(p > 0.0 && p < 1.0) {
                return Err(EnvError::ProbabilityOutOfRange {
                    site: lo + k as i64,
                    value: p,
                });
            }
        }
        Ok(Environment { lo, probs, source })
    }

    fn check_window(lo: i64, hi: i64) -> Result<(), EnvError> {
        if hi < lo {
            Err(EnvError::EmptyWindow { lo, hi })
        } else {
            Ok(())
        }
    }

    /// Constant `p` on `[lo, hi]`.
    pub fn homogeneous(p: f64, lo: i64, hi: i64) -> Result<Self, EnvError> {
        Self::check_window(lo, hi)?;
        check_open_unit("p", p)?;
        Self::new(lo, vec![p; (hi - lo + 1) as usize], Source::Deterministic)
    }

    /// `alpha` on even sites and `beta` on odd sites (absolute parity).
    pub fn periodic(alpha: f64, beta: f64, lo: i64, hi: i64) -> Result<Self, EnvError> {
        check_open_unit("alpha", alpha)?;
        check_open_unit("beta", beta)?;
        Self::check_window(lo, hi)?;
        let probs = (lo..=hi)
            .map(|i| if i.rem_euclid(2) == 0 { alpha } else { beta })
            .collect();
        Self::new(lo, probs, Source::Periodic { alpha, beta })
    }

    /// Independent draws from `dist`. The value at site `i` depends only on
    /// `(dist, seed, i)`, so nested windows agree on their overlap.
    pub fn iid(dist: DistSpec, seed: u64, lo: i64, hi: i64) -> Result<Self, EnvError> {
        dist.validate()?;
        Self::check_window(lo, hi)?;
        let probs = (lo..=hi)
            .map(|i| {
                let mut r = rng::stream(seed, Domain::Environment, rng::site_stream(i));
                dist.sample(&mut r)
            })
            .collect();
        Self::new(lo, probs, Source::Iid { dist, seed })
    }

    pub fn lo(&self) -> i64 {
        self.lo
    }

    pub fn hi(&self) -> i64 {
        self.lo + self.probs.len() as i64 - 1
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn source(&self) -> Source {
        self.source
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn contains(&self, site: i64) -> bool {
        site >= self.lo && site <= self.hi()
    }

    pub fn covers(&self, lo: i64, hi: i64) -> bool {
        lo >= self.lo && hi <= self.hi()
    }

    pub fn try_p(&self, site: i64) -> Option<f64> {
        self.contains(site)
            .then(|| self.probs[(site - self.lo) as usize])
    }

    /// `p_site`. Panics outside the window.
    pub fn p(&self, site: i64) -> f64 {
        match self.try_p(site) {
            Some(p) => p,
            None => panic!("site {site} outside [{}, {}]", self.lo, self.hi()),
        }
    }

    /// `q_site = 1 - p_site`. Panics outside the window.
    pub fn q(&self, site: i64) -> f64 {
        1.0 - self.p(site)
    }

    /// The sub-environment on `[lo, hi]`.
    pub fn restrict(&self, lo: i64, hi: i64) -> Result<Self, EnvError> {
        Self::check_window(lo, hi)?;
        if !self.covers(lo, hi) {
            let site = if lo < self.lo { lo } else { hi };
            return Err(EnvError::SiteOutsideWindow {
                site,
                lo: self.lo,
                hi: self.hi(),
            });
        }
        let a = (lo - self.lo) as usize;
        let b = (hi - self.lo) as usize;
        Ok(Environment {
            lo,
            probs: self.probs[a..=b].to_vec(),
            source: self.source,
        })
    }

    /// Copy with `p_site` replaced; the result is tagged deterministic.
    pub fn with_p(&self, site: i64, p: f64) -> Result<Self, EnvError> {
        if !self.contains(site) {
            return Err(EnvError::SiteOutsideWindow {
                site,
                lo: self.lo,
                hi: self.hi(),
            });
        }
        let mut probs = self.probs.clone();
        probs[(site - self.lo) as usize] = p;
        Self::new(self.lo, probs, Source::Deterministic)
    }

    /// Copy with every `p_i` raised by `delta`; the result is tagged deterministic.
    pub fn shifted(&self, delta: f64) -> Result<Self, EnvError> {
        let probs = self.probs.iter().map(|p| p + delta).collect();
        Self::new(self.lo, probs, Source::Deterministic)
    }

    /// `p_i >= other.p_i` at every site of `[lo, hi]`, both windows covering it.
    pub fn dominates_on(&self, other: &Environment, lo: i64, hi: i64) -> bool {
        self.covers(lo, hi) && other.covers(lo, hi) && (lo..=hi).all(|i| self.p(i) >= other.p(i))
    }

    /// Text record: a header line then one `site p` pair per line.
    pub fn to_record(&self) -> String {
        let mut out = format!(
            "# env lo={} hi={} source={}\n",
            self.lo,
            self.hi(),
            self.source
        );
        for (k, p) in self.probs.iter().enumerate() {
            out.push_str(&format!(
                "{} {}\n",
                self.lo + k as i64,
                crate::fmt_sig17(*p)
            ));
        }
        out
    }

    pub fn from_record(text: &str) -> Result<Self, EnvError> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(EnvError::Parse {
            line: 1,
            reason: "empty record".into(),
        })?;
        let bad = |line: usize, reason: &str| EnvError::Parse {
            line: line + 1,
            reason: reason.to_string(),
        };
        let rest = header
            .trim()
            .strip_prefix("# env ")
            .ok_or_else(|| bad(0, "missing `# env` header"))?;
        let mut lo = None;
        let mut hi = None;
        let mut source = None;
        for field in rest.split_whitespace() {
            match field.split_once('=') {
                Some(("lo", v)) => lo = v.parse::<i64>().ok(),
                Some(("hi", v)) => hi = v.parse::<i64>().ok(),
                Some(("source", v)) => source = Some(v.parse::<Source>()?),
                _ => return Err(bad(0, &format!("unknown header field `{field}`"))),
            }
        }
        let lo = lo.ok_or_else(|| bad(0, "missing lo"))?;
        let hi = hi.ok_or_else(|| bad(0, "missing hi"))?;
        let source = source.ok_or_else(|| bad(0, "missing source"))?;
        Self::check_window(lo, hi)?;
        let mut probs = Vec::with_capacity((hi - lo + 1) as usize);
        for (idx, line) in lines {
            let mut parts = line.split_whitespace();
            let site: i64 = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(idx, "bad site"))?;
            let p: f64 = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(idx, "bad probability"))?;
            if parts.next().is_some() {
                return Err(bad(idx, "trailing fields"));
            }
            if site != lo + probs.len() as i64 {
                return Err(bad(idx, "sites must be consecutive from lo"));
            }
            probs.push(p);
        }
        if probs.len() as i64 != hi - lo + 1 {
            return Err(bad(0, "site count does not match header"));
        }
        Self::new(lo, probs, source)
    }
}

/// Reversible product-measure profile `π_i` (stored as `ln π_i`) with
/// densities `α_i = π_i / (1 + π_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiProfile {
    base_index: i64,
    lo: i64,
    log_pi: Vec<f64>,
    probs: Vec<f64>,
}

/// Profile for `π_{base} = pi0` with `π_i p_i = π_{i+1} q_{i+1}` across the
/// whole window. The base is site 0 when the window contains it, else `lo`.
pub fn pi_profile(env: &Environment, pi0: f64) -> Result<PiProfile, EnvError> {
    let base = if env.contains(0) { 0 } else { env.lo() };
    pi_profile_at(env, base, pi0)
}

/// As [`pi_profile`] with an explicit base site.
pub fn pi_profile_at(env: &Environment, base: i64, pi0: f64) -> Result<PiProfile, EnvError> {
    if !(pi0 > 0.0 && pi0.is_finite()) {
        return Err(EnvError::InvalidPi0(pi0));
    }
    if !env.contains(base) {
        return Err(EnvError::SiteOutsideWindow {
            site: base,
            lo: env.lo(),
            hi: env.hi(),
        });
    }
    let n = env.len();
    let b = (base - env.lo()) as usize;
    let lp: Vec<f64> = env.probs().iter().map(|p| p.ln()).collect();
    let lq: Vec<f64> = env.probs().iter().map(|p| (-p).ln_1p()).collect();
    let mut log_pi = vec![0.0; n];
    log_pi[b] = pi0.ln();
    for k in b..n - 1 {
        log_pi[k + 1] = log_pi[k] + lp[k] - lq[k + 1];
    }
    for k in (0..b).rev() {
        log_pi[k] = log_pi[k + 1] - lp[k] + lq[k + 1];
    }
    Ok(PiProfile {
        base_index: base,
        lo: env.lo(),
        log_pi,
        probs: env.probs().to_vec(),
    })
}

impl PiProfile {
    pub fn base_index(&self) -> i64 {
        self.base_index
    }

    pub fn lo(&self) -> i64 {
        self.lo
    }

    pub fn hi(&self) -> i64 {
        self.lo + self.log_pi.len() as i64 - 1
    }

    pub fn len(&self) -> usize {
        self.log_pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_pi.is_empty()
    }

    pub fn log_pi(&self) -> &[f64] {
        &self.log_pi
    }

    pub fn log_pi_at(&self, site: i64) -> Option<f64> {
        (site >= self.lo && site <= self.hi()).then(|| self.log_pi[(site - self.lo) as usize])
    }

    /// `π_i` on the window; fails at the first site that is not representable.
    pub fn pi(&self) -> Result<Vec<f64>, EnvError> {
        self.log_pi
            .iter()
            .enumerate()
            .map(|(k, &l)| {
                let v = l.exp();
                if v.is_finite() && v > 0.0 {
                    Ok(v)
                } else {
                    Err(EnvError::PiOverflow {
                        site: self.lo + k as i64,
                        log_pi: l,
                    })
                }
            })
            .collect()
    }

    pub fn alpha(&self) -> Vec<f64> {
        self.log_pi.iter().map(|&l| logistic(l)).collect()
    }

    /// The same profile for `c · π`.
    pub fn scaled(&self, c: f64) -> Result<PiProfile, EnvError> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(EnvError::InvalidPi0(c));
        }
        let shift = c.ln();
        Ok(PiProfile {
            log_pi: self.log_pi.iter().map(|l| l + shift).collect(),
            ..self.clone()
        })
    }

    /// `max_i |π_i p_i - π_{i+1} q_{i+1}| / π_i`, evaluated in log space.
    pub fn recursion_residual(&self) -> f64 {
        (0..self.len().saturating_sub(1))
            .map(|k| {
                let ratio = (self.log_pi[k + 1] - self.log_pi[k]).exp();
                (self.probs[k] - ratio * (1.0 - self.probs[k + 1])).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Relative defect of `α_i p_i (1-α_{i+1}) = q_{i+1} α_{i+1} (1-α_i)`.
    pub fn product_balance_residual(&self) -> f64 {
        let a = self.alpha();
        let h: Vec<f64> = self.log_pi.iter().map(|l| series::logistic(-l)).collect();
        (0..self.len().saturating_sub(1))
            .map(|k| {
                let lhs = a[k] * self.probs[k] * h[k + 1];
                let rhs = (1.0 - self.probs[k + 1]) * a[k + 1] * h[k];
                let scale = lhs.abs().max(rhs.abs());
                if scale == 0.0 {
                    0.0
                } else {
                    (lhs - rhs).abs() / scale
                }
            })
            .fold(0.0, f64::max)
    }
}

/// Label of the extremal reversible measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegimeCase {
    /// `Σ α_i(1-α_i) = ∞`: the product measures themselves are extremal.
    ProductExtremal,
    /// `Σ α_i < ∞`: blocking measures indexed by the particle count.
    BlockingLeft,
    /// `Σ (1-α_i) < ∞`: blocking measures indexed by the hole count.
    BlockingRight,
    /// Particles summable on one side, holes on the other.
    BlockingTwoSided,
}

impl RegimeCase {
    pub fn label(&self) -> &'static str {
        match self {
            RegimeCase::ProductExtremal => "product_extremal",
            RegimeCase::BlockingLeft => "blocking_left",
            RegimeCase::BlockingRight => "blocking_right",
            RegimeCase::BlockingTwoSided => "blocking_two_sided",
        }
    }
}

impl fmt::Display for RegimeCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Window partial sums of the three series behind the classification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartialSums {
    /// `Σ α_i (1 - α_i)`
    pub variance: f64,
    /// `Σ α_i`
    pub particles: f64,
    /// `Σ (1 - α_i)`
    pub holes: f64,
}

impl PartialSums {
    fn of_log_pi(log_pi: &[f64]) -> Self {
        let mut s = PartialSums {
            variance: 0.0,
            particles: 0.0,
            holes: 0.0,
        };
        for &l in log_pi {
            let a = logistic(l);
            let h = logistic(-l);
            s.variance += a * h;
            s.particles += a;
            s.holes += h;
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegimeClassification {
    pub divergent: bool,
    pub case: RegimeCase,
    /// Sums for the profile as given.
    pub partial_sums: PartialSums,
    /// `Σ α_i(1-α_i)` in the scale-normalized gauge used for the verdict.
    pub normalized_variance: f64,
}

/// Per-side convergence evidence, sides listed inside-out.
struct SideTails {
    particles: bool,
    holes: bool,
    variance: bool,
    mean_tail_alpha: f64,
}

fn side_tails(log_pi_outward: &[f64], tail_len: usize) -> SideTails {
    // ln α = -softplus(-l), ln(1-α) = -softplus(l)
    let la: Vec<f64> = log_pi_outward.iter().map(|&l| -softplus(-l)).collect();
    let lh: Vec<f64> = log_pi_outward.iter().map(|&l| -softplus(l)).collect();
    let lv: Vec<f64> = la.iter().zip(&lh).map(|(a, h)| a + h).collect();
    let n = log_pi_outward.len();
    let tail = &log_pi_outward[n - tail_len.min(n)..];
    SideTails {
        particles: series::tail_is_geometric(&la, tail_len),
        holes: series::tail_is_geometric(&lh, tail_len),
        variance: series::tail_is_geometric(&lv, tail_len),
        mean_tail_alpha: tail.iter().map(|&l| logistic(l)).sum::<f64>() / tail.len() as f64,
    }
}

/// Diagnose the reversible-measure regime of a profile on its finite window.
///
/// The infinite sums cannot be decided from a window, so the verdict is a
/// heuristic. The profile is first rescaled (`π → cπ`) to the gauge where
/// `α = 1/2` at some window site and `Σ α_i(1-α_i)` is largest; this makes
/// the verdict independent of `π_0`. The sum is called divergent when it
/// exceeds `tail_threshold` and the log-terms of the outermost quarter on
/// at least one side do not decay geometrically.
pub fn classify(
    profile: &PiProfile,
    tail_threshold: f64,
) -> Result<RegimeClassification, EnvError> {
    let n = profile.len();
    if n < MIN_CLASSIFY_SPAN {
        return Err(EnvError::InsufficientSpan(n));
    }
    let lp = profile.log_pi();
    let partial_sums = PartialSums::of_log_pi(lp);

    let mut best_shift = 0.0;
    let mut best_sum = f64::NEG_INFINITY;
    for &center in lp {
        let sum: f64 = lp
            .iter()
            .map(|&l| {
                let x = l - center;
                logistic(x) * logistic(-x)
            })
            .sum();
        if sum > best_sum {
            best_sum = sum;
            best_shift = -center;
        }
    }
    let normalized: Vec<f64> = lp.iter().map(|l| l + best_shift).collect();

    let tail_len = n / 4;
    let mid = n / 2;
    let right = side_tails(&normalized[mid..], tail_len);
    let left_outward: Vec<f64> = normalized[..mid].iter().rev().copied().collect();
    let left = side_tails(&left_outward, tail_len);

    let divergent = best_sum > tail_threshold && !(left.variance && right.variance);
    let case = if divergent {
        RegimeCase::ProductExtremal
    } else {
        let particle_side = |s: &SideTails| match (s.particles, s.holes) {
            (true, false) => true,
            (false, true) => false,
            _ => s.mean_tail_alpha < 0.5,
        };
        match (particle_side(&left), particle_side(&right)) {
            (true, true) => RegimeCase::BlockingLeft,
            (false, false) => RegimeCase::BlockingRight,
            _ => RegimeCase::BlockingTwoSided,
        }
    };
    Ok(RegimeClassification {
        divergent,
        case,
        partial_sums,
        normalized_variance: best_sum,
    })
}
