//! Independent walkers: single-particle invariant measures `σ` with constant
//! flux, the series criteria for positive solutions, and the drift sign of
//! an i.i.d. environment.
//!
//! `σ` is invariant when `σ_i = σ_{i-1} p_{i-1} + σ_{i+1} q_{i+1}`; the bond
//! flux `p_i σ_i - q_{i+1} σ_{i+1}` is then the same on every bond.

use std::fmt;

use rand::Rng;
use thiserror::Error;

use crate::env::{DistSpec, EnvError, Environment};
use crate::rng::{self, Domain};
use crate::series;

/// Sites required on each side of 0 by [`criterion`].
pub const MIN_CRITERION_SIDE: i64 = 32;
/// Fewest Monte Carlo samples accepted by [`solomon_classify`].
pub const MIN_DRIFT_SAMPLES: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FreeError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("sigma becomes nonpositive ({value:e}) at site {site}")]
    NonPositive { site: i64, value: f64 },
    #[error("sigma at the base must be positive and finite, got {0}")]
    InvalidBase(f64),
    #[error("flux must be finite, got {0}")]
    InvalidFlux(f64),
    #[error("window [{lo}, {hi}] must reach {MIN_CRITERION_SIDE} sites on each side of 0")]
    WindowTooSmall { lo: i64, hi: i64 },
    #[error("need at least {MIN_DRIFT_SAMPLES} samples, got {0}")]
    TooFewSamples(usize),
}

/// Positive solution of the invariance equations with flux `flux`.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaProfile {
    pub base_index: i64,
    pub lo: i64,
    pub sigma: Vec<f64>,
    pub flux: f64,
    probs: Vec<f64>,
}

/// Solve for `σ` with `σ_base = sigma_base` and flux `phi`, base at site 0
/// when the window contains it and at `lo` otherwise.
pub fn solve_sigma(
    env: &Environment,
    phi: f64,
    sigma_base: f64,
) -> Result<SigmaProfile, FreeError> {
    let base = if env.contains(0) { 0 } else { env.lo() };
    solve_sigma_at(env, base, phi, sigma_base)
}

/// Run the flux recursion outward from `base` in both directions:
/// `σ_{i+1} = (p_i σ_i - φ) / q_{i+1}` to the right and
/// `σ_i = (φ + q_{i+1} σ_{i+1}) / p_i` to the left. Unrolled, the rightward
/// step is `σ_n = (∏ p / ∏ q) σ_m - (φ / q_n)(1 + p_{n-1}/q_{n-1} + ...)`.
pub fn solve_sigma_at(
    env: &Environment,
    base: i64,
    phi: f64,
    sigma_base: f64,
) -> Result<SigmaProfile, FreeError> {
    if !(sigma_base > 0.0 && sigma_base.is_finite()) {
        return Err(FreeError::InvalidBase(sigma_base));
    }
    if !phi.is_finite() {
        return Err(FreeError::InvalidFlux(phi));
    }
    if !env.contains(base) {
        return Err(EnvError::SiteOutsideWindow {
            site: base,
            lo: env.lo(),
            hi: env.hi(),
        }
        .into());
    }
    let p = env.probs();
    let n = p.len();
    let b = (base - env.lo()) as usize;
    let mut sigma = vec![0.0; n];
    sigma[b] = sigma_base;
    let check = |k: usize, v: f64| {
        if v > 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(FreeError::NonPositive {
                site: env.lo() + k as i64,
                value: v,
            })
        }
    };
    for k in b..n - 1 {
        sigma[k + 1] = check(k + 1, (p[k] * sigma[k] - phi) / (1.0 - p[k + 1]))?;
    }
    for k in (0..b).rev() {
        sigma[k] = check(k, (phi + (1.0 - p[k + 1]) * sigma[k + 1]) / p[k])?;
    }
    Ok(SigmaProfile {
        base_index: base,
        lo: env.lo(),
        sigma,
        flux: phi,
        probs: p.to_vec(),
    })
}

/// Bond fluxes `p_i σ_i - q_{i+1} σ_{i+1}` of arbitrary values `sigma` placed
/// on `first_site, first_site + 1, ...`.
pub fn sigma_bond_flux(
    env: &Environment,
    first_site: i64,
    sigma: &[f64],
) -> Result<Vec<f64>, FreeError> {
    let last = first_site + sigma.len() as i64 - 1;
    if !env.covers(first_site, last) {
        return Err(EnvError::SiteOutsideWindow {
            site: if env.contains(first_site) {
                last
            } else {
                first_site
            },
            lo: env.lo(),
            hi: env.hi(),
        }
        .into());
    }
    Ok(sigma
        .windows(2)
        .enumerate()
        .map(|(k, w)| {
            let i = first_site + k as i64;
            env.p(i) * w[0] - env.q(i + 1) * w[1]
        })
        .collect())
}

impl SigmaProfile {
    pub fn hi(&self) -> i64 {
        self.lo + self.sigma.len() as i64 - 1
    }

    /// Largest relative defect of the invariance equation over interior sites,
    /// measured against the largest of the three terms.
    pub fn invariance_residual(&self) -> f64 {
        let s = &self.sigma;
        let p = &self.probs;
        (1..s.len().saturating_sub(1))
            .map(|i| {
                let from_left = s[i - 1] * p[i - 1];
                let from_right = s[i + 1] * (1.0 - p[i + 1]);
                let scale = s[i].max(from_left).max(from_right);
                (s[i] - from_left - from_right).abs() / scale
            })
            .fold(0.0, f64::max)
    }

    /// Largest relative deviation of a bond flux from `self.flux`, measured
    /// against the larger of the two bond terms.
    pub fn flux_residual(&self) -> f64 {
        let s = &self.sigma;
        let p = &self.probs;
        (0..s.len().saturating_sub(1))
            .map(|i| {
                let right = p[i] * s[i];
                let left = (1.0 - p[i + 1]) * s[i + 1];
                (right - left - self.flux).abs() / right.max(left)
            })
            .fold(0.0, f64::max)
    }

    /// CSV `site,sigma` preceded by a `# phi=` comment.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# phi={}\nsite,sigma\n", crate::fmt_sig17(self.flux));
        for (k, v) in self.sigma.iter().enumerate() {
            out.push_str(&format!(
                "{},{}\n",
                self.lo + k as i64,
                crate::fmt_sig17(*v)
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FluxVerdict {
    /// Only the rightward series converges.
    PositiveFluxExists,
    /// Only the leftward series converges.
    NegativeFluxExists,
    /// Both series diverge.
    Neither,
    /// Both series converge.
    BothExist,
}

impl FluxVerdict {
    pub fn label(&self) -> &'static str {
        match self {
            FluxVerdict::PositiveFluxExists => "positive_flux_exists",
            FluxVerdict::NegativeFluxExists => "negative_flux_exists",
            FluxVerdict::Neither => "neither",
            FluxVerdict::BothExist => "both_exist",
        }
    }
}

impl fmt::Display for FluxVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Partial sums of `1 + q_0/p_0 + q_0 q_1/(p_0 p_1) + ...` (rightward) and of
/// `1 + p_0/q_0 + p_0 p_{-1}/(q_0 q_{-1}) + ...` (leftward), kept as logs.
#[derive(Debug, Clone, PartialEq)]
pub struct FluxCriterion {
    pub log_positive_partial: Vec<f64>,
    pub log_negative_partial: Vec<f64>,
    pub verdict: FluxVerdict,
}

impl FluxCriterion {
    pub fn positive_sum(&self) -> Vec<f64> {
        self.log_positive_partial.iter().map(|l| l.exp()).collect()
    }

    pub fn negative_sum(&self) -> Vec<f64> {
        self.log_negative_partial.iter().map(|l| l.exp()).collect()
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Log-terms and log partial sums of `Σ_j ∏_{k<j} ratio_k`.
fn running_series(log_ratios: impl Iterator<Item = f64>) -> (Vec<f64>, Vec<f64>) {
    let mut terms = vec![0.0];
    let mut sums = vec![0.0];
    let mut lt = 0.0;
    for lr in log_ratios {
        lt += lr;
        terms.push(lt);
        let s = log_add(*sums.last().unwrap(), lt);
        sums.push(s);
    }
    (terms, sums)
}

/// Decide on the window which of the two series converge.
pub fn criterion(env: &Environment) -> Result<FluxCriterion, FreeError> {
    if env.lo() > -MIN_CRITERION_SIDE || env.hi() < MIN_CRITERION_SIDE {
        return Err(FreeError::WindowTooSmall {
            lo: env.lo(),
            hi: env.hi(),
        });
    }
    let log_q_over_p = |i: i64| {
        let p = env.p(i);
        (-p).ln_1p() - p.ln()
    };
    // terms use p_0 .. p_{hi-1} and p_0, p_{-1}, .., p_{lo+1}
    let (pos_terms, pos_sums) = running_series((0..env.hi()).map(log_q_over_p));
    let (neg_terms, neg_sums) = running_series((0..-env.lo()).map(|k| -log_q_over_p(-k)));
    let pos = series::tail_is_geometric(&pos_terms, pos_terms.len() / 4);
    let neg = series::tail_is_geometric(&neg_terms, neg_terms.len() / 4);
    let verdict = match (pos, neg) {
        (true, false) => FluxVerdict::PositiveFluxExists,
        (false, true) => FluxVerdict::NegativeFluxExists,
        (false, false) => FluxVerdict::Neither,
        (true, true) => FluxVerdict::BothExist,
    };
    Ok(FluxCriterion {
        log_positive_partial: pos_sums,
        log_negative_partial: neg_sums,
        verdict,
    })
}

/// Sixteen log-spaced flux values from `1e-4` up to `p̄ - q̄` of the window.
pub fn phi_grid(env: &Environment) -> Vec<f64> {
    let mean = env.probs().iter().sum::<f64>() / env.len() as f64;
    let top = (2.0 * mean - 1.0).abs().max(1e-4);
    let (a, b) = (1e-4f64.ln(), top.ln());
    (0..16)
        .map(|k| (a + (b - a) * k as f64 / 15.0).exp())
        .collect()
}

/// Search `phis` for a flux carried by a positive `σ` on the whole window.
///
/// For `φ > 0` the smallest admissible `σ` at the base comes from running the
/// leftward recursion in from `σ_hi = 0`; the search starts from twice that.
/// Negative fluxes mirror this from `σ_lo = 0`.
pub fn positive_solution_witness(env: &Environment, phis: &[f64]) -> Option<SigmaProfile> {
    let base = if env.contains(0) { 0 } else { env.lo() };
    let b = (base - env.lo()) as usize;
    let p = env.probs();
    for &phi in phis {
        let mut r = 0.0;
        if phi > 0.0 {
            for k in (b..p.len() - 1).rev() {
                r = (phi + (1.0 - p[k + 1]) * r) / p[k];
            }
        } else if phi < 0.0 {
            for k in 0..b {
                r = (p[k] * r - phi) / (1.0 - p[k + 1]);
            }
        }
        let start = if r > 0.0 { 2.0 * r } else { 1.0 };
        if let Ok(s) = solve_sigma_at(env, base, phi, start) {
            return Some(s);
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriftSign {
    /// `E log(p_0/q_0) > 0`: walkers are transient to the right.
    Right,
    /// `E log(p_0/q_0) < 0`.
    Left,
    /// Exactly zero (closed form only).
    Zero,
    /// The confidence interval straddles zero.
    Undetermined,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub ci95: (f64, f64),
    pub sign: DriftSign,
    /// Computed in closed form rather than sampled.
    pub exact: bool,
}

fn log_ratio(p: f64) -> f64 {
    p.ln() - (-p).ln_1p()
}

/// Sign of `E log(p_0/q_0)` under `dist`; closed form for two-point laws,
/// Monte Carlo otherwise.
pub fn solomon_classify(
    dist: &DistSpec,
    samples: usize,
    seed: u64,
) -> Result<DriftEstimate, FreeError> {
    if samples < MIN_DRIFT_SAMPLES {
        return Err(FreeError::TooFewSamples(samples));
    }
    dist.validate()?;
    if let DistSpec::TwoPoint { a, b, prob_a } = *dist {
        let mean = prob_a * log_ratio(a) + (1.0 - prob_a) * log_ratio(b);
        let sign = if mean.abs() <= 1e-12 {
            DriftSign::Zero
        } else if mean > 0.0 {
            DriftSign::Right
        } else {
            DriftSign::Left
        };
        let mean = if sign == DriftSign::Zero { 0.0 } else { mean };
        return Ok(DriftEstimate {
            mean,
            std_error: 0.0,
            ci95: (mean, mean),
            sign,
            exact: true,
        });
    }
    let mut r = rng::stream(seed, Domain::Drift, 0);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..samples {
        let x = log_ratio(dist.sample(&mut r));
        sum += x;
        sum_sq += x * x;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
    let std_error = (var / n).sqrt();
    let ci95 = (mean - 1.96 * std_error, mean + 1.96 * std_error);
    let sign = if ci95.0 > 0.0 {
        DriftSign::Right
    } else if ci95.1 < 0.0 {
        DriftSign::Left
    } else {
        DriftSign::Undetermined
    };
    // keep the generator type inferred as used
    let _ = r.gen::<u8>();
    Ok(DriftEstimate {
        mean,
        std_error,
        ci95,
        sign,
        exact: false,
    })
}
