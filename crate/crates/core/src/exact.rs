//! Exact stationary laws of finite chains.
//!
//! A chain on `[m, n]` has `2^L` configurations, `L = n - m + 1`. Bond
//! `(i, i+1)` moves a particle right at rate `p_i` and left at rate
//! `q_{i+1}`. A driven chain also fills site `m` at rate `p_{m-1}` and empties
//! site `n` at rate `p_n`; a closed chain has no boundary moves and lives in
//! one particle-number sector.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::env::{EnvError, Environment, PiProfile};
use crate::series::log_sum_exp;

/// Default cap on the chain length handled by the exact solver.
pub const DEFAULT_MAX_LEN: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExactError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("chain [{m}, {n}] is empty")]
    EmptyChain { m: i64, n: i64 },
    #[error("environment [{lo}, {hi}] does not cover [{need_lo}, {need_hi}]")]
    NotCovered {
        lo: i64,
        hi: i64,
        need_lo: i64,
        need_hi: i64,
    },
    #[error("chain length {len} exceeds the exact limit {max}")]
    TooLong { len: usize, max: usize },
    #[error("{particles} particles do not fit on {len} sites")]
    TooManyParticles { particles: usize, len: usize },
    #[error("operation needs a closed chain")]
    NotClosed,
    #[error("dense solve failed: singular system")]
    Singular,
    #[error(
        "iterative solve stopped after {iterations} iterations at relative residual {residual:e}"
    )]
    NotConverged { iterations: usize, residual: f64 },
    #[error("density {value} at index {index} is outside [0, 1]")]
    DensityOutOfRange { index: usize, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    /// Injection at `m` at rate `p_{m-1}`, extraction at `n` at rate `p_n`.
    Driven,
    /// No boundary moves; the chain is started and solved in one sector.
    Closed { particles: usize },
}

impl fmt::Display for Boundary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Boundary::Driven => f.write_str("driven"),
            Boundary::Closed { particles } => write!(f, "closed({particles})"),
        }
    }
}

/// A finite chain on `[m, n]` together with an environment covering `[m-1, n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSpec {
    m: i64,
    n: i64,
    env: Environment,
    boundary: Boundary,
}

impl ChainSpec {
    pub fn new(env: Environment, m: i64, n: i64, boundary: Boundary) -> Result<Self, ExactError> {
        if n < m {
            return Err(ExactError::EmptyChain { m, n });
        }
        if !env.covers(m - 1, n) {
            return Err(ExactError::NotCovered {
                lo: env.lo(),
                hi: env.hi(),
                need_lo: m - 1,
                need_hi: n,
            });
        }
        let len = (n - m + 1) as usize;
        if len > 64 {
            return Err(ExactError::TooLong { len, max: 64 });
        }
        if let Boundary::Closed { particles } = boundary {
            if particles > len {
                return Err(ExactError::TooManyParticles { particles, len });
            }
        }
        Ok(ChainSpec {
            m,
            n,
            env,
            boundary,
        })
    }

    pub fn driven(env: Environment, m: i64, n: i64) -> Result<Self, ExactError> {
        Self::new(env, m, n, Boundary::Driven)
    }

    pub fn closed(env: Environment, m: i64, n: i64, particles: usize) -> Result<Self, ExactError> {
        Self::new(env, m, n, Boundary::Closed { particles })
    }

    pub fn m(&self) -> i64 {
        self.m
    }

    pub fn n(&self) -> i64 {
        self.n
    }

    pub fn len(&self) -> usize {
        (self.n - self.m + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn env(&self) -> &Environment {
        &self.env
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn is_driven(&self) -> bool {
        self.boundary == Boundary::Driven
    }

    /// Same sites and boundary with another environment.
    pub fn with_env(&self, env: Environment) -> Result<Self, ExactError> {
        Self::new(env, self.m, self.n, self.boundary)
    }

    /// Same chain in another particle sector (closed chains only).
    pub fn with_particles(&self, particles: usize) -> Result<Self, ExactError> {
        match self.boundary {
            Boundary::Closed { .. } => Self::new(
                self.env.clone(),
                self.m,
                self.n,
                Boundary::Closed { particles },
            ),
            Boundary::Driven => Err(ExactError::NotClosed),
        }
    }

    /// Rate of moving a particle from `site` to `site + 1`.
    pub fn right_rate(&self, site: i64) -> f64 {
        self.env.p(site)
    }

    /// Rate of moving a particle from `site + 1` to `site`.
    pub fn left_rate(&self, site: i64) -> f64 {
        self.env.q(site + 1)
    }

    pub fn injection_rate(&self) -> f64 {
        self.env.p(self.m - 1)
    }

    pub fn extraction_rate(&self) -> f64 {
        self.env.p(self.n)
    }

    /// Mirror image with occupancies complemented: configuration `η` maps to
    /// `ζ(j) = 1 - η(m+n-j)` and the environment to `p'_j = p_{m+n-1-j}`.
    /// This is an exact symmetry of the driven chain when `p` is 2-periodic.
    pub fn mirror(&self) -> Result<Self, ExactError> {
        let probs = (self.m - 1..=self.n)
            .map(|j| self.env.p(self.m + self.n - 1 - j))
            .collect();
        let env = Environment::new(self.m - 1, probs, crate::env::Source::Deterministic)?;
        let boundary = match self.boundary {
            Boundary::Driven => Boundary::Driven,
            Boundary::Closed { particles } => Boundary::Closed {
                particles: self.len() - particles,
            },
        };
        Self::new(env, self.m, self.n, boundary)
    }
}

/// Bit-reversed complement of a state: the configuration map of [`ChainSpec::mirror`].
pub fn mirror_state(state: usize, len: usize) -> usize {
    let mut out = 0;
    for k in 0..len {
        if state >> k & 1 == 0 {
            out |= 1 << (len - 1 - k);
        }
    }
    out
}

/// Render a state as `L` characters, site `m` first.
pub fn state_label(state: usize, len: usize) -> String {
    (0..len)
        .map(|k| if state >> k & 1 == 1 { '1' } else { '0' })
        .collect()
}

/// Sparse rate matrix over all `2^L` configurations (off-diagonal entries in
/// row-compressed form, exit rates as the negated diagonal).
#[derive(Debug, Clone)]
pub struct Generator {
    len: usize,
    row_start: Vec<usize>,
    targets: Vec<u32>,
    rates: Vec<f64>,
    exit: Vec<f64>,
}

/// Build the generator, rejecting `L > DEFAULT_MAX_LEN`.
pub fn build_generator(spec: &ChainSpec) -> Result<Generator, ExactError> {
    build_generator_with(spec, DEFAULT_MAX_LEN)
}

pub fn build_generator_with(spec: &ChainSpec, max_len: usize) -> Result<Generator, ExactError> {
    let len = spec.len();
    if len > max_len || len > 30 {
        return Err(ExactError::TooLong {
            len,
            max: max_len.min(30),
        });
    }
    let states = 1usize << len;
    let right: Vec<f64> = (0..len.saturating_sub(1))
        .map(|k| spec.right_rate(spec.m + k as i64))
        .collect();
    let left: Vec<f64> = (0..len.saturating_sub(1))
        .map(|k| spec.left_rate(spec.m + k as i64))
        .collect();
    let driven = spec.is_driven();
    let (inject, extract) = (spec.injection_rate(), spec.extraction_rate());

    let mut row_start = Vec::with_capacity(states + 1);
    let mut targets = Vec::with_capacity(states * (len + 1) / 2 + 1);
    let mut rates = Vec::with_capacity(states * (len + 1) / 2 + 1);
    let mut exit = Vec::with_capacity(states);
    for s in 0..states {
        row_start.push(targets.len());
        let mut out = 0.0;
        let mut push = |t: usize, r: f64| {
            targets.push(t as u32);
            rates.push(r);
            out += r;
        };
        for k in 0..len.saturating_sub(1) {
            match (s >> k & 1, s >> (k + 1) & 1) {
                (1, 0) => push(s ^ (0b11 << k), right[k]),
                (0, 1) => push(s ^ (0b11 << k), left[k]),
                _ => {}
            }
        }
        if driven {
            if s & 1 == 0 {
                push(s | 1, inject);
            }
            if s >> (len - 1) & 1 == 1 {
                push(s ^ (1 << (len - 1)), extract);
            }
        }
        exit.push(out);
    }
    row_start.push(targets.len());
    Ok(Generator {
        len,
        row_start,
        targets,
        rates,
        exit,
    })
}

impl Generator {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn states(&self) -> usize {
        self.exit.len()
    }

    /// Off-diagonal entries of row `state`.
    pub fn transitions(&self, state: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_start[state]..self.row_start[state + 1];
        self.targets[r.clone()]
            .iter()
            .zip(&self.rates[r])
            .map(|(&t, &q)| (t as usize, q))
    }

    /// Total rate out of `state` (negated diagonal entry).
    pub fn exit_rate(&self, state: usize) -> f64 {
        self.exit[state]
    }

    /// Entry `(from, to)` of the rate matrix.
    pub fn rate(&self, from: usize, to: usize) -> f64 {
        if from == to {
            return -self.exit[from];
        }
        self.transitions(from)
            .filter(|&(t, _)| t == to)
            .map(|(_, r)| r)
            .sum()
    }

    pub fn nonzeros(&self) -> usize {
        self.targets.len()
    }

    /// `(πQ)_j` for every state `j`.
    pub fn apply_left(&self, probs: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = probs.iter().zip(&self.exit).map(|(p, e)| -p * e).collect();
        for (s, &p) in probs.iter().enumerate() {
            if p != 0.0 {
                for (t, r) in self.transitions(s) {
                    out[t] += p * r;
                }
            }
        }
        out
    }

    /// `max_j |(πQ)_j|`.
    pub fn balance_residual(&self, probs: &[f64]) -> f64 {
        self.apply_left(probs)
            .iter()
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Numerical settings of [`stationary_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_len: usize,
    /// Largest state space solved by dense LU; bigger ones use GMRES.
    pub dense_max_states: usize,
    /// Relative residual at which GMRES stops.
    pub tolerance: f64,
    pub restart: usize,
    pub max_iterations: usize,
    /// Uniformized power sweeps that pick the pinned state and the initial
    /// guess for GMRES.
    pub warmup_sweeps: usize,
    /// Largest balance residual of the normalized GMRES solution accepted.
    pub acceptance: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_len: DEFAULT_MAX_LEN,
            dense_max_states: 1 << 8,
            tolerance: 1e-14,
            restart: 60,
            max_iterations: 50_000,
            warmup_sweeps: 200,
            acceptance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolverKind {
    DenseLu,
    Gmres {
        iterations: usize,
    },
    /// Closed-form conditioned product weights.
    ProductWeights,
}

/// Stationary law over all `2^L` configurations.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryDistribution {
    pub spec: ChainSpec,
    pub probs: Vec<f64>,
    /// `max_j |(πQ)_j|` at the solution.
    pub residual: f64,
    pub sector: Option<usize>,
    pub solver: SolverKind,
}

impl StationaryDistribution {
    pub fn len(&self) -> usize {
        self.spec.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `P(η(site) = 1)` for each site of `[m, n]`.
    pub fn densities(&self) -> Vec<f64> {
        let len = self.len();
        let mut d = vec![0.0; len];
        for (s, &p) in self.probs.iter().enumerate() {
            if p != 0.0 {
                for (k, dk) in d.iter_mut().enumerate() {
                    if s >> k & 1 == 1 {
                        *dk += p;
                    }
                }
            }
        }
        d
    }

    /// CSV with header `state,prob`; states as 0/1 strings, site `m` first.
    pub fn to_csv(&self) -> String {
        let len = self.len();
        let mut out = String::from("state,prob\n");
        for (s, p) in self.probs.iter().enumerate() {
            out.push_str(&state_label(s, len));
            out.push(',');
            out.push_str(&crate::fmt_sig17(*p));
            out.push('\n');
        }
        out
    }
}

/// Stationary law with default solver settings.
pub fn stationary(spec: &ChainSpec) -> Result<StationaryDistribution, ExactError> {
    stationary_with(spec, &SolverOptions::default())
}

/// Solve `πQ = 0`, `Σπ = 1` on the driven state space or the closed sector.
pub fn stationary_with(
    spec: &ChainSpec,
    opts: &SolverOptions,
) -> Result<StationaryDistribution, ExactError> {
    let gen = build_generator_with(spec, opts.max_len)?;
    let len = spec.len();
    let (states, sector): (Vec<usize>, Option<usize>) = match spec.boundary() {
        Boundary::Driven => ((0..gen.states()).collect(), None),
        Boundary::Closed { particles } => (
            (0..gen.states())
                .filter(|s| s.count_ones() as usize == particles)
                .collect(),
            Some(particles),
        ),
    };
    debug_assert!(len <= 30);
    let (local, solver) = if states.len() <= opts.dense_max_states {
        (solve_dense(&gen, &states)?, SolverKind::DenseLu)
    } else {
        let (x, iterations) = solve_gmres(&gen, &states, opts);
        (x, SolverKind::Gmres { iterations })
    };
    let mut probs = vec![0.0; gen.states()];
    for (&s, &x) in states.iter().zip(&local) {
        probs[s] = x.max(0.0);
    }
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    let residual = gen.balance_residual(&probs);
    if let SolverKind::Gmres { iterations } = solver {
        if residual.is_nan() || residual > opts.acceptance {
            return Err(ExactError::NotConverged {
                iterations,
                residual,
            });
        }
    }
    Ok(StationaryDistribution {
        spec: spec.clone(),
        probs,
        residual,
        sector,
        solver,
    })
}

fn local_index(gen: &Generator, states: &[usize]) -> Vec<u32> {
    let mut idx = vec![u32::MAX; gen.states()];
    for (i, &s) in states.iter().enumerate() {
        idx[s] = i as u32;
    }
    idx
}

/// Dense LU on the transposed generator with the first equation replaced by
/// the normalization row.
fn solve_dense(gen: &Generator, states: &[usize]) -> Result<Vec<f64>, ExactError> {
    let n = states.len();
    if n == 1 {
        return Ok(vec![1.0]);
    }
    let idx = local_index(gen, states);
    let mut a = DMatrix::<f64>::zeros(n, n);
    for (i, &s) in states.iter().enumerate() {
        a[(i, i)] -= gen.exit_rate(s);
        for (t, r) in gen.transitions(s) {
            let j = idx[t];
            debug_assert!(j != u32::MAX, "transition leaves the solved state set");
            a[(j as usize, i)] += r;
        }
    }
    for c in 0..n {
        a[(0, c)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(n);
    b[0] = 1.0;
    let x = a.lu().solve(&b).ok_or(ExactError::Singular)?;
    Ok(x.iter().copied().collect())
}

/// Restarted GMRES on `Q^T x = 0` with the equation of the first state
/// replaced by `x_0 = 1`, right-preconditioned by an incomplete LU
/// factorization with zero fill.
fn solve_gmres(gen: &Generator, states: &[usize], opts: &SolverOptions) -> (Vec<f64>, usize) {
    let n = states.len();
    let idx = local_index(gen, states);
    let guess = warm_start(gen, states, &idx, opts.warmup_sweeps);
    let pin = (0..n).fold(0, |best, i| if guess[i] > guess[best] { i } else { best });
    // rows of A = Q^T: entry (j, i) = rate(i -> j), diagonal -exit(j)
    let mut rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
    for (i, &s) in states.iter().enumerate() {
        rows[i].push((i as u32, -gen.exit_rate(s)));
        for (t, r) in gen.transitions(s) {
            rows[idx[t] as usize].push((i as u32, r));
        }
    }
    rows[pin] = vec![(pin as u32, 1.0)];
    let a = Csr::from_rows(rows);
    let ilu = a.ilu0();

    let mut b = vec![0.0; n];
    b[pin] = 1.0;
    let mut x: Vec<f64> = guess.iter().map(|g| g / guess[pin]).collect();
    let iterations = match ilu {
        Some(ilu) => gmres(
            |v, out| a.mul(v, out),
            |v, out| ilu.solve(v, out),
            &b,
            &mut x,
            opts.restart,
            opts.max_iterations,
            opts.tolerance,
        ),
        None => gmres(
            |v, out| a.mul(v, out),
            |v, out| out.copy_from_slice(v),
            &b,
            &mut x,
            opts.restart,
            opts.max_iterations,
            opts.tolerance,
        ),
    }
    .0;
    (x, iterations)
}

/// `sweeps` steps of the uniformized chain from the uniform law.
fn warm_start(gen: &Generator, states: &[usize], idx: &[u32], sweeps: usize) -> Vec<f64> {
    let n = states.len();
    let lambda = 1.05 * states.iter().map(|&s| gen.exit_rate(s)).fold(0.0, f64::max);
    let mut v = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    if lambda == 0.0 {
        return v;
    }
    for _ in 0..sweeps {
        for (i, &s) in states.iter().enumerate() {
            next[i] = v[i] * (1.0 - gen.exit_rate(s) / lambda);
        }
        for (i, &s) in states.iter().enumerate() {
            for (t, r) in gen.transitions(s) {
                next[idx[t] as usize] += v[i] * r / lambda;
            }
        }
        std::mem::swap(&mut v, &mut next);
    }
    v
}

/// Compressed sparse rows with sorted column indices.
#[derive(Debug, Clone)]
struct Csr {
    start: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
    diag: Vec<usize>,
}

impl Csr {
    fn from_rows(rows: Vec<Vec<(u32, f64)>>) -> Self {
        let mut start = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        let mut diag = Vec::with_capacity(rows.len());
        for (r, mut row) in rows.into_iter().enumerate() {
            row.sort_by_key(|e| e.0);
            start.push(cols.len());
            let mut d = usize::MAX;
            for (c, v) in row {
                if cols.len() > *start.last().unwrap() && *cols.last().unwrap() == c {
                    *vals.last_mut().unwrap() += v;
                    continue;
                }
                if c as usize == r {
                    d = cols.len();
                }
                cols.push(c);
                vals.push(v);
            }
            diag.push(d);
        }
        start.push(cols.len());
        Csr {
            start,
            cols,
            vals,
            diag,
        }
    }

    fn mul(&self, x: &[f64], y: &mut [f64]) {
        for (r, yr) in y.iter_mut().enumerate() {
            let k = self.start[r]..self.start[r + 1];
            *yr = self.cols[k.clone()]
                .iter()
                .zip(&self.vals[k])
                .map(|(&c, v)| v * x[c as usize])
                .sum();
        }
    }

    /// Zero-fill incomplete LU, stored in place (unit lower factor implied).
    fn ilu0(&self) -> Option<Csr> {
        let n = self.diag.len();
        let mut f = self.clone();
        let mut pos = vec![usize::MAX; n];
        for i in 0..n {
            let row = f.start[i]..f.start[i + 1];
            for k in row.clone() {
                pos[f.cols[k] as usize] = k;
            }
            for kk in row.clone() {
                let k = f.cols[kk] as usize;
                if k >= i {
                    break;
                }
                let dk = f.diag[k];
                if dk == usize::MAX || f.vals[dk] == 0.0 {
                    return None;
                }
                let factor = f.vals[kk] / f.vals[dk];
                f.vals[kk] = factor;
                for kj in dk + 1..f.start[k + 1] {
                    let p = pos[f.cols[kj] as usize];
                    if p != usize::MAX {
                        f.vals[p] -= factor * f.vals[kj];
                    }
                }
            }
            for k in row {
                pos[f.cols[k] as usize] = usize::MAX;
            }
            if f.diag[i] == usize::MAX || f.vals[f.diag[i]] == 0.0 {
                return None;
            }
        }
        Some(f)
    }

    /// Solve `LU z = v` with the factors from [`Csr::ilu0`].
    fn solve(&self, v: &[f64], z: &mut [f64]) {
        let n = self.diag.len();
        for i in 0..n {
            let mut s = v[i];
            for k in self.start[i]..self.diag[i] {
                s -= self.vals[k] * z[self.cols[k] as usize];
            }
            z[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = z[i];
            for k in self.diag[i] + 1..self.start[i + 1] {
                s -= self.vals[k] * z[self.cols[k] as usize];
            }
            z[i] = s / self.vals[self.diag[i]];
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Right-preconditioned GMRES(restart). Convergence is judged on
/// `‖b - Ax‖₂ / ‖x‖₁`, the residual of the normalized solution. Returns the
/// iteration count and that residual.
/// Restarts without halving the residual before GMRES gives up.
const STALL_RESTARTS: usize = 8;

fn gmres(
    apply: impl Fn(&[f64], &mut [f64]),
    precondition: impl Fn(&[f64], &mut [f64]),
    b: &[f64],
    x: &mut [f64],
    restart: usize,
    max_iterations: usize,
    tol: f64,
) -> (usize, f64) {
    let n = b.len();
    let scale = |x: &[f64]| {
        x.iter()
            .map(|v| v.abs())
            .sum::<f64>()
            .max(f64::MIN_POSITIVE)
    };
    let mut r = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(restart + 1);
    let mut h = vec![vec![0.0; restart]; restart + 1];
    let mut cs = vec![0.0; restart];
    let mut sn = vec![0.0; restart];
    let mut g = vec![0.0; restart + 1];
    let mut total = 0;
    let mut best = f64::INFINITY;
    let mut stalled = 0;

    loop {
        apply(x, &mut r);
        r.iter_mut().zip(b).for_each(|(ri, bi)| *ri = bi - *ri);
        let beta = norm(&r);
        let xnorm = scale(x);
        let rel = beta / xnorm;
        if rel < 0.5 * best {
            best = rel;
            stalled = 0;
        } else {
            stalled += 1;
        }
        if rel <= tol || total >= max_iterations || stalled >= STALL_RESTARTS {
            return (total, rel);
        }
        basis.clear();
        basis.push(r.iter().map(|v| v / beta).collect());
        g.iter_mut().for_each(|v| *v = 0.0);
        g[0] = beta;
        let mut steps = 0;
        for j in 0..restart {
            precondition(&basis[j], &mut z);
            apply(&z, &mut w);
            for (i, v) in basis.iter().enumerate() {
                let hij = dot(&w, v);
                h[i][j] = hij;
                w.iter_mut().zip(v).for_each(|(wk, vk)| *wk -= hij * vk);
            }
            let hn = norm(&w);
            h[j + 1][j] = hn;
            for i in 0..j {
                let t = cs[i] * h[i][j] + sn[i] * h[i + 1][j];
                h[i + 1][j] = -sn[i] * h[i][j] + cs[i] * h[i + 1][j];
                h[i][j] = t;
            }
            let d = h[j][j].hypot(h[j + 1][j]);
            cs[j] = h[j][j] / d;
            sn[j] = h[j + 1][j] / d;
            h[j][j] = d;
            h[j + 1][j] = 0.0;
            g[j + 1] = -sn[j] * g[j];
            g[j] *= cs[j];
            steps = j + 1;
            total += 1;
            if g[j + 1].abs() / xnorm <= tol * 0.1 || total >= max_iterations || hn == 0.0 {
                break;
            }
            basis.push(w.iter().map(|v| v / hn).collect());
        }
        let mut y = vec![0.0; steps];
        for i in (0..steps).rev() {
            let s: f64 = (i + 1..steps).map(|k| h[i][k] * y[k]).sum();
            y[i] = (g[i] - s) / h[i][i];
        }
        w.iter_mut().for_each(|v| *v = 0.0);
        for (yk, v) in y.iter().zip(&basis) {
            w.iter_mut().zip(v).for_each(|(wi, vi)| *wi += yk * vi);
        }
        precondition(&w, &mut z);
        x.iter_mut().zip(&z).for_each(|(xi, zi)| *xi += zi);
    }
}

/// Flux through every bond of a chain under a stationary law.
#[derive(Debug, Clone, PartialEq)]
pub struct FluxReport {
    /// `(bond, flux)` keyed by the left site of the bond. In a driven chain
    /// bond `m-1` is the injection balance and bond `n` the extraction balance.
    pub per_bond: Vec<(i64, f64)>,
    pub value: f64,
    /// `max - min` over `per_bond`.
    pub spread: f64,
}

impl FluxReport {
    fn from_bonds(per_bond: Vec<(i64, f64)>) -> Self {
        if per_bond.is_empty() {
            return FluxReport {
                per_bond,
                value: 0.0,
                spread: 0.0,
            };
        }
        let value = per_bond.iter().map(|b| b.1).sum::<f64>() / per_bond.len() as f64;
        let max = per_bond
            .iter()
            .map(|b| b.1)
            .fold(f64::NEG_INFINITY, f64::max);
        let min = per_bond.iter().map(|b| b.1).fold(f64::INFINITY, f64::min);
        FluxReport {
            per_bond,
            value,
            spread: max - min,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bond,flux\n");
        for (b, f) in &self.per_bond {
            out.push_str(&format!("{b},{}\n", crate::fmt_sig17(*f)));
        }
        out
    }
}

/// `p_i P(1,0) - q_{i+1} P(0,1)` on every interior bond, plus the boundary
/// balances `p_{m-1} P(η(m)=0)` and `p_n P(η(n)=1)` for driven chains.
pub fn flux_exact(dist: &StationaryDistribution) -> FluxReport {
    let spec = &dist.spec;
    let len = spec.len();
    let bonds = len - 1;
    let mut ten = vec![0.0; bonds];
    let mut one = vec![0.0; bonds];
    let mut first_empty = 0.0;
    let mut last_full = 0.0;
    for (s, &p) in dist.probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for k in 0..bonds {
            match (s >> k & 1, s >> (k + 1) & 1) {
                (1, 0) => ten[k] += p,
                (0, 1) => one[k] += p,
                _ => {}
            }
        }
        if s & 1 == 0 {
            first_empty += p;
        }
        if s >> (len - 1) & 1 == 1 {
            last_full += p;
        }
    }
    let mut per_bond = Vec::with_capacity(len + 1);
    if spec.is_driven() {
        per_bond.push((spec.m() - 1, spec.injection_rate() * first_empty));
    }
    for k in 0..bonds {
        let i = spec.m() + k as i64;
        per_bond.push((i, spec.right_rate(i) * ten[k] - spec.left_rate(i) * one[k]));
    }
    if spec.is_driven() {
        per_bond.push((spec.n(), spec.extraction_rate() * last_full));
    }
    FluxReport::from_bonds(per_bond)
}

/// Bond fluxes of the product measure with densities `alpha` on the sites
/// `first_site, first_site + 1, ...`: bond `i` carries
/// `p_i α_i (1-α_{i+1}) - q_{i+1} α_{i+1} (1-α_i)`.
pub fn flux_of_product(
    env: &Environment,
    first_site: i64,
    alpha: &[f64],
) -> Result<Vec<f64>, ExactError> {
    if let Some((index, &value)) = alpha
        .iter()
        .enumerate()
        .find(|(_, a)| !(0.0..=1.0).contains(*a))
    {
        return Err(ExactError::DensityOutOfRange { index, value });
    }
    if alpha.len() < 2 {
        return Ok(Vec::new());
    }
    let last = first_site + alpha.len() as i64 - 1;
    if !env.covers(first_site, last) {
        return Err(ExactError::NotCovered {
            lo: env.lo(),
            hi: env.hi(),
            need_lo: first_site,
            need_hi: last,
        });
    }
    Ok(alpha
        .windows(2)
        .enumerate()
        .map(|(k, w)| {
            let i = first_site + k as i64;
            env.p(i) * w[0] * (1.0 - w[1]) - env.q(i + 1) * w[1] * (1.0 - w[0])
        })
        .collect())
}

/// `max |π(η) r(η, η') - π(η') r(η', η)|` over all transitions.
pub fn detailed_balance_residual(dist: &StationaryDistribution) -> Result<f64, ExactError> {
    let gen = build_generator_with(&dist.spec, dist.spec.len())?;
    let mut worst: f64 = 0.0;
    for s in 0..gen.states() {
        for (t, r) in gen.transitions(s) {
            let back = gen.rate(t, s);
            worst = worst.max((dist.probs[s] * r - dist.probs[t] * back).abs());
        }
    }
    Ok(worst)
}

/// Product weights `∏_{η(i)=1} π_i` restricted to the configurations with
/// `particles` particles, normalized.
pub fn conditioned_product_measure(
    spec: &ChainSpec,
    particles: usize,
    profile: &PiProfile,
) -> Result<StationaryDistribution, ExactError> {
    if spec.is_driven() {
        return Err(ExactError::NotClosed);
    }
    let spec = spec.with_particles(particles)?;
    let len = spec.len();
    if len > 30 {
        return Err(ExactError::TooLong { len, max: 30 });
    }
    let log_pi: Vec<f64> = (0..len)
        .map(|k| {
            let site = spec.m() + k as i64;
            profile.log_pi_at(site).ok_or(ExactError::NotCovered {
                lo: profile.lo(),
                hi: profile.hi(),
                need_lo: spec.m(),
                need_hi: spec.n(),
            })
        })
        .collect::<Result<_, _>>()?;
    let sector: Vec<usize> = (0..1usize << len)
        .filter(|s| s.count_ones() as usize == particles)
        .collect();
    let weights: Vec<f64> = sector
        .iter()
        .map(|&s| {
            (0..len)
                .filter(|k| s >> k & 1 == 1)
                .map(|k| log_pi[k])
                .sum()
        })
        .collect();
    let log_z = log_sum_exp(&weights);
    let mut probs = vec![0.0; 1 << len];
    for (&s, w) in sector.iter().zip(&weights) {
        probs[s] = (w - log_z).exp();
    }
    let gen = build_generator_with(&spec, len)?;
    let residual = gen.balance_residual(&probs);
    Ok(StationaryDistribution {
        spec,
        probs,
        residual,
        sector: Some(particles),
        solver: SolverKind::ProductWeights,
    })
}
