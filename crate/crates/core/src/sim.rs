//! Event-driven simulation of a single chain and of the monotone coupling of
//! two chains with ordered environments.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::env::{EnvError, Environment};
use crate::exact::{Boundary, ChainSpec, ExactError};
use crate::rng::{self, Domain};

pub const MAX_SIM_LEN: usize = 64;
pub const DEFAULT_BURN_IN: f64 = 0.1;
pub const DEFAULT_BATCHES: usize = 20;
/// Shortest batch, in time units, accepted by [`flux_mc`].
pub const MIN_BATCH_TIME: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Exact(#[from] ExactError),
    #[error("chain of length {0} exceeds the simulator limit of {MAX_SIM_LEN}")]
    TooLong(usize),
    #[error("horizon must be positive and finite, got {0}")]
    InvalidHorizon(f64),
    #[error("horizon {horizon} leaves batches of {batch_time:.3} < {MIN_BATCH_TIME} time units")]
    HorizonTooShort { horizon: f64, batch_time: f64 },
    #[error("burn-in fraction must lie in [0, 1), got {0}")]
    InvalidBurnIn(f64),
    #[error("need at least {DEFAULT_BATCHES} batches, got {0}")]
    TooFewBatches(usize),
    #[error("bond {bond} is not a bond of the chain on [{m}, {n}]")]
    BondOutOfRange { bond: i64, m: i64, n: i64 },
    #[error("upper environment is below the lower one at site {site} ({high} < {low})")]
    NotOrdered { site: i64, low: f64, high: f64 },
    #[error("{0}")]
    Violation(Box<Violation>),
}

/// Occupancies of a chain, bit `k` for site `m + k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Configuration {
    bits: u64,
    len: usize,
}

impl Configuration {
    pub fn empty(len: usize) -> Self {
        assert!(len <= MAX_SIM_LEN);
        Configuration { bits: 0, len }
    }

    pub fn from_bits(bits: u64, len: usize) -> Self {
        assert!(len <= MAX_SIM_LEN);
        let mask = if len == 64 {
            u64::MAX
        } else {
            (1u64 << len) - 1
        };
        Configuration {
            bits: bits & mask,
            len,
        }
    }

    /// Parse `"0110"`, site `m` first.
    pub fn from_label(label: &str) -> Option<Self> {
        let mut bits = 0u64;
        for (k, c) in label.chars().enumerate() {
            match c {
                '1' => bits |= 1 << k,
                '0' => {}
                _ => return None,
            }
        }
        let len = label.chars().count();
        (len <= MAX_SIM_LEN).then_some(Configuration { bits, len })
    }

    pub fn bits(&self) -> u64 {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, k: usize) -> bool {
        self.bits >> k & 1 == 1
    }

    pub fn particles(&self) -> u32 {
        self.bits.count_ones()
    }

    fn hop(&mut self, k: usize) {
        self.bits ^= 0b11 << k;
    }

    fn flip(&mut self, k: usize) {
        self.bits ^= 1 << k;
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for k in 0..self.len {
            f.write_str(if self.get(k) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// A single particle move. `Right(k)` and `Left(k)` act on the bond between
/// chain positions `k` and `k + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Move {
    Right(usize),
    Left(usize),
    Inject,
    Extract,
}

impl Move {
    fn enabled(self, c: &Configuration) -> bool {
        match self {
            Move::Right(k) => c.get(k) && !c.get(k + 1),
            Move::Left(k) => !c.get(k) && c.get(k + 1),
            Move::Inject => !c.get(0),
            Move::Extract => c.get(c.len - 1),
        }
    }

    /// Apply if enabled; returns the crossing-counter slot and sign it touches.
    fn apply(self, c: &mut Configuration) -> Option<(usize, i64)> {
        if !self.enabled(c) {
            return None;
        }
        match self {
            Move::Right(k) => {
                c.hop(k);
                Some((k + 1, 1))
            }
            Move::Left(k) => {
                c.hop(k);
                Some((k + 1, -1))
            }
            Move::Inject => {
                c.flip(0);
                Some((0, 1))
            }
            Move::Extract => {
                c.flip(c.len - 1);
                Some((c.len, 1))
            }
        }
    }

    fn kind(self) -> &'static str {
        match self {
            Move::Right(_) => "right",
            Move::Left(_) => "left",
            Move::Inject => "inject",
            Move::Extract => "extract",
        }
    }

    /// Site the particle leaves: `m - 1` for an injection.
    fn site(self, m: i64, len: usize) -> i64 {
        match self {
            Move::Right(k) => m + k as i64,
            Move::Left(k) => m + k as i64 + 1,
            Move::Inject => m - 1,
            Move::Extract => m + len as i64 - 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub time: f64,
    pub site: i64,
    pub kind: &'static str,
}

/// CSV `time,site,kind`.
pub fn events_to_csv(events: &[EventRecord]) -> String {
    let mut out = String::from("time,site,kind\n");
    for e in events {
        out.push_str(&format!(
            "{},{},{}\n",
            crate::fmt_sig17(e.time),
            e.site,
            e.kind
        ));
    }
    out
}

fn check_len(spec: &ChainSpec) -> Result<(), SimError> {
    if spec.len() > MAX_SIM_LEN {
        return Err(SimError::TooLong(spec.len()));
    }
    Ok(())
}

fn initial_configuration(spec: &ChainSpec) -> Configuration {
    match spec.boundary() {
        Boundary::Driven => Configuration::empty(spec.len()),
        Boundary::Closed { particles } => Configuration::from_bits(
            if particles == 64 {
                u64::MAX
            } else {
                (1u64 << particles) - 1
            },
            spec.len(),
        ),
    }
}

fn exp_time(rng: &mut ChaCha8Rng, rate: f64) -> f64 {
    let u: f64 = rng.gen();
    -(1.0 - u).ln() / rate
}

/// History of one chain. `crossings[j]` is the net number of rightward
/// crossings of bond `m - 1 + j`; slot 0 counts injections and slot `L`
/// extractions.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub spec: ChainSpec,
    pub seed: u64,
    pub time: f64,
    pub config: Configuration,
    pub crossings: Vec<i64>,
    /// Time each site has spent occupied.
    pub occupation: Vec<f64>,
    pub events: u64,
    pub log: Option<Vec<EventRecord>>,
}

impl Trajectory {
    /// Net crossings of the bond whose left site is `bond`.
    pub fn crossings_at(&self, bond: i64) -> Option<i64> {
        let j = bond - (self.spec.m() - 1);
        (0..self.crossings.len() as i64)
            .contains(&j)
            .then(|| self.crossings[j as usize])
    }

    pub fn occupation_fraction(&self) -> Vec<f64> {
        self.occupation.iter().map(|t| t / self.time).collect()
    }
}

/// Stepper for a single chain.
#[derive(Debug, Clone)]
pub struct Simulator {
    traj: Trajectory,
    moves: Vec<(Move, f64)>,
    rng: ChaCha8Rng,
    next_event: f64,
    pending: Option<Move>,
}

impl Simulator {
    pub fn new(spec: &ChainSpec, seed: u64) -> Result<Self, SimError> {
        check_len(spec)?;
        let len = spec.len();
        let mut moves = Vec::new();
        for k in 0..len - 1 {
            let i = spec.m() + k as i64;
            moves.push((Move::Right(k), spec.right_rate(i)));
            moves.push((Move::Left(k), spec.left_rate(i)));
        }
        if spec.is_driven() {
            moves.push((Move::Inject, spec.injection_rate()));
            moves.push((Move::Extract, spec.extraction_rate()));
        }
        let mut sim = Simulator {
            traj: Trajectory {
                spec: spec.clone(),
                seed,
                time: 0.0,
                config: initial_configuration(spec),
                crossings: vec![0; len + 1],
                occupation: vec![0.0; len],
                events: 0,
                log: None,
            },
            moves,
            rng: rng::stream(seed, Domain::Chain, 0),
            next_event: 0.0,
            pending: None,
        };
        sim.schedule();
        Ok(sim)
    }

    pub fn record_events(mut self) -> Self {
        self.traj.log = Some(Vec::new());
        self
    }

    pub fn trajectory(&self) -> &Trajectory {
        &self.traj
    }

    pub fn into_trajectory(self) -> Trajectory {
        self.traj
    }

    fn schedule(&mut self) {
        let c = self.traj.config;
        let total: f64 = self
            .moves
            .iter()
            .filter(|(mv, _)| mv.enabled(&c))
            .map(|(_, r)| r)
            .sum();
        if total <= 0.0 {
            self.pending = None;
            self.next_event = f64::INFINITY;
            return;
        }
        self.next_event = self.traj.time + exp_time(&mut self.rng, total);
        let mut u = self.rng.gen::<f64>() * total;
        let mut chosen = None;
        for &(mv, r) in self.moves.iter().filter(|(mv, _)| mv.enabled(&c)) {
            chosen = Some(mv);
            if u < r {
                break;
            }
            u -= r;
        }
        self.pending = chosen;
    }

    fn accumulate(&mut self, until: f64) {
        let dt = until - self.traj.time;
        for k in 0..self.traj.config.len() {
            if self.traj.config.get(k) {
                self.traj.occupation[k] += dt;
            }
        }
        self.traj.time = until;
    }

    /// Run every event up to time `t` and stop the clock at `t`.
    pub fn run_until(&mut self, t: f64) {
        while self.next_event <= t {
            let when = self.next_event;
            self.accumulate(when);
            let mv = self.pending.expect("scheduled move");
            let len = self.traj.config.len();
            if let Some((slot, sign)) = mv.apply(&mut self.traj.config) {
                self.traj.crossings[slot] += sign;
                self.traj.events += 1;
                if let Some(log) = &mut self.traj.log {
                    log.push(EventRecord {
                        time: when,
                        site: mv.site(self.traj.spec.m(), len),
                        kind: mv.kind(),
                    });
                }
            }
            self.schedule();
        }
        if t > self.traj.time {
            self.accumulate(t);
        }
    }
}

/// Simulate `spec` up to `horizon`, starting empty (driven) or with the
/// particles packed to the left (closed).
pub fn gillespie_run(spec: &ChainSpec, seed: u64, horizon: f64) -> Result<Trajectory, SimError> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(SimError::InvalidHorizon(horizon));
    }
    let mut sim = Simulator::new(spec, seed)?;
    sim.run_until(horizon);
    Ok(sim.into_trajectory())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluxEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub batches: usize,
    pub horizon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluxMcOptions {
    pub burn_in: f64,
    pub batches: usize,
}

impl Default for FluxMcOptions {
    fn default() -> Self {
        FluxMcOptions {
            burn_in: DEFAULT_BURN_IN,
            batches: DEFAULT_BATCHES,
        }
    }
}

fn bond_slot(spec: &ChainSpec, bond: i64) -> Result<usize, SimError> {
    let (lo, hi) = if spec.is_driven() {
        (spec.m() - 1, spec.n())
    } else {
        (spec.m(), spec.n() - 1)
    };
    if bond < lo || bond > hi {
        return Err(SimError::BondOutOfRange {
            bond,
            m: spec.m(),
            n: spec.n(),
        });
    }
    Ok((bond - (spec.m() - 1)) as usize)
}

/// Net crossings of `bond` per unit time after the default burn-in, with a
/// batch-means standard error.
pub fn flux_mc(
    spec: &ChainSpec,
    seed: u64,
    horizon: f64,
    bond: i64,
) -> Result<FluxEstimate, SimError> {
    flux_mc_with(spec, seed, horizon, bond, FluxMcOptions::default())
}

pub fn flux_mc_with(
    spec: &ChainSpec,
    seed: u64,
    horizon: f64,
    bond: i64,
    opts: FluxMcOptions,
) -> Result<FluxEstimate, SimError> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(SimError::InvalidHorizon(horizon));
    }
    if !(0.0..1.0).contains(&opts.burn_in) {
        return Err(SimError::InvalidBurnIn(opts.burn_in));
    }
    if opts.batches < DEFAULT_BATCHES {
        return Err(SimError::TooFewBatches(opts.batches));
    }
    let slot = bond_slot(spec, bond)?;
    let start = horizon * opts.burn_in;
    let batch_time = (horizon - start) / opts.batches as f64;
    if batch_time < MIN_BATCH_TIME {
        return Err(SimError::HorizonTooShort {
            horizon,
            batch_time,
        });
    }
    let mut sim = Simulator::new(spec, seed)?;
    sim.run_until(start);
    let mut last = sim.trajectory().crossings[slot];
    let first = last;
    let mut rates = Vec::with_capacity(opts.batches);
    for b in 1..=opts.batches {
        let t = if b == opts.batches {
            horizon
        } else {
            start + batch_time * b as f64
        };
        sim.run_until(t);
        let now = sim.trajectory().crossings[slot];
        rates.push((now - last) as f64 / batch_time);
        last = now;
    }
    let mean = (last - first) as f64 / (horizon - start);
    let nb = rates.len() as f64;
    let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (nb - 1.0);
    Ok(FluxEstimate {
        mean,
        std_error: (var / nb).sqrt(),
        batches: opts.batches,
        horizon,
    })
}

/// `(x, η, η', y)`: `x` counts injections into `η'` minus injections into
/// `η`, `y` extractions from `η` minus extractions from `η'`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoupledState {
    pub x: i64,
    pub eta: Configuration,
    pub eta_prime: Configuration,
    pub y: i64,
}

impl CoupledState {
    pub fn start(config: Configuration) -> Self {
        CoupledState {
            x: 0,
            eta: config,
            eta_prime: config,
            y: 0,
        }
    }

    /// `x + Σ_{j<=k} [η(j) - η'(j)]` for chain positions `j`; `prefix(0)` is
    /// `x` (site `m - 1`) and `prefix(L)` runs over the whole chain.
    pub fn prefixes(&self) -> Vec<i64> {
        let mut out = Vec::with_capacity(self.eta.len() + 1);
        let mut acc = self.x;
        out.push(acc);
        for k in 0..self.eta.len() {
            acc += self.eta.get(k) as i64 - self.eta_prime.get(k) as i64;
            out.push(acc);
        }
        out
    }

    /// First failing invariant, if any.
    pub fn check(&self) -> Result<(), String> {
        let pre = self.prefixes();
        if let Some(j) = pre.iter().position(|&v| v < 0) {
            return Err(format!(
                "prefix at position {} is {} < 0",
                j as i64 - 1,
                pre[j]
            ));
        }
        let total = pre.last().unwrap() + self.y;
        if total != 0 {
            return Err(format!("x + Σ[η - η'] + y = {total} != 0"));
        }
        Ok(())
    }
}

impl fmt::Display for CoupledState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.x, self.eta, self.eta_prime, self.y
        )
    }
}

/// Which copies a clock moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Joint,
    PrimeOnly,
    PlainOnly,
}

impl Channel {
    pub fn label(&self) -> &'static str {
        match self {
            Channel::Joint => "joint",
            Channel::PrimeOnly => "prime-only",
            Channel::PlainOnly => "plain-only",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clock {
    pub mv: Move,
    pub channel: Channel,
    pub rate: f64,
}

/// Rule producing the clocks of the coupled pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CouplingTable {
    /// Shared moves at the smaller rate; the residual of a right move,
    /// injection or extraction drives `η'` alone and the residual of a left
    /// move drives `η` alone.
    #[default]
    Basic,
    /// Every residual clock drives the wrong copy. Negative control only:
    /// it breaks the prefix invariant.
    SwappedResidual,
}

impl CouplingTable {
    pub fn clocks(&self, spec: &ChainSpec, low: &Environment, high: &Environment) -> Vec<Clock> {
        let m = spec.m();
        let len = spec.len();
        let mut out = Vec::new();
        let mut pair = |mv, shared: f64, residual: f64, channel| {
            if shared > 0.0 {
                out.push(Clock {
                    mv,
                    channel: Channel::Joint,
                    rate: shared,
                });
            }
            if residual > 0.0 {
                out.push(Clock {
                    mv,
                    channel,
                    rate: residual,
                });
            }
        };
        let (up, down) = match self {
            CouplingTable::Basic => (Channel::PrimeOnly, Channel::PlainOnly),
            CouplingTable::SwappedResidual => (Channel::PlainOnly, Channel::PrimeOnly),
        };
        for k in 0..len - 1 {
            let i = m + k as i64;
            pair(Move::Right(k), low.p(i), high.p(i) - low.p(i), up);
            pair(
                Move::Left(k),
                high.q(i + 1),
                low.q(i + 1) - high.q(i + 1),
                down,
            );
        }
        if spec.is_driven() {
            pair(Move::Inject, low.p(m - 1), high.p(m - 1) - low.p(m - 1), up);
            pair(
                Move::Extract,
                low.p(spec.n()),
                high.p(spec.n()) - low.p(spec.n()),
                up,
            );
        }
        out
    }
}

/// Everything known about the first event that broke an invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub seed: u64,
    pub event: u64,
    pub time: f64,
    pub clock: Clock,
    pub before: CoupledState,
    pub after: CoupledState,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "seed {} event {} at t={:.6}: {} {} clock (rate {}) took {} to {}: {}",
            self.seed,
            self.event,
            self.time,
            self.clock.channel.label(),
            self.clock.mv.kind(),
            self.clock.rate,
            self.before,
            self.after,
            self.detail
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledTrajectory {
    pub seed: u64,
    pub time: f64,
    pub state: CoupledState,
    pub crossings_low: Vec<i64>,
    pub crossings_high: Vec<i64>,
    /// Clock rings that changed at least one copy; each was checked.
    pub events: u64,
    pub log: Option<Vec<EventRecord>>,
}

/// Stepper for the coupled pair, driven by one clock of constant total rate.
#[derive(Debug, Clone)]
pub struct CoupledSimulator {
    spec: ChainSpec,
    clocks: Vec<Clock>,
    total: f64,
    rng: ChaCha8Rng,
    traj: CoupledTrajectory,
}

fn check_order(spec: &ChainSpec, low: &Environment, high: &Environment) -> Result<(), SimError> {
    for env in [low, high] {
        if !env.covers(spec.m() - 1, spec.n()) {
            return Err(ExactError::NotCovered {
                lo: env.lo(),
                hi: env.hi(),
                need_lo: spec.m() - 1,
                need_hi: spec.n(),
            }
            .into());
        }
    }
    for site in spec.m() - 1..=spec.n() {
        if high.p(site) < low.p(site) {
            return Err(SimError::NotOrdered {
                site,
                low: low.p(site),
                high: high.p(site),
            });
        }
    }
    Ok(())
}

impl CoupledSimulator {
    pub fn new(
        spec: &ChainSpec,
        low: &Environment,
        high: &Environment,
        seed: u64,
        table: CouplingTable,
    ) -> Result<Self, SimError> {
        check_len(spec)?;
        check_order(spec, low, high)?;
        let clocks = table.clocks(spec, low, high);
        let total = clocks.iter().map(|c| c.rate).sum();
        let len = spec.len();
        Ok(CoupledSimulator {
            spec: spec.clone(),
            clocks,
            total,
            rng: rng::stream(seed, Domain::Coupled, 0),
            traj: CoupledTrajectory {
                seed,
                time: 0.0,
                state: CoupledState::start(initial_configuration(spec)),
                crossings_low: vec![0; len + 1],
                crossings_high: vec![0; len + 1],
                events: 0,
                log: None,
            },
        })
    }

    pub fn record_events(mut self) -> Self {
        self.traj.log = Some(Vec::new());
        self
    }

    pub fn trajectory(&self) -> &CoupledTrajectory {
        &self.traj
    }

    pub fn clocks(&self) -> &[Clock] {
        &self.clocks
    }

    /// Ring one clock and verify every invariant afterwards.
    pub fn step(&mut self) -> Result<(), SimError> {
        if self.total <= 0.0 {
            self.traj.time = f64::INFINITY;
            return Ok(());
        }
        self.traj.time += exp_time(&mut self.rng, self.total);
        let mut u = self.rng.gen::<f64>() * self.total;
        let mut clock = *self.clocks.last().unwrap();
        for c in &self.clocks {
            if u < c.rate {
                clock = *c;
                break;
            }
            u -= c.rate;
        }
        let before = self.traj.state;
        let changed = apply_clock(&mut self.traj, clock);
        if !changed {
            return Ok(());
        }
        self.traj.events += 1;
        if let Some(log) = &mut self.traj.log {
            log.push(EventRecord {
                time: self.traj.time,
                site: clock.mv.site(self.spec.m(), self.spec.len()),
                kind: clock.channel.label(),
            });
        }
        if let Err(detail) = verify(&self.traj) {
            return Err(SimError::Violation(Box::new(Violation {
                seed: self.traj.seed,
                event: self.traj.events,
                time: self.traj.time,
                clock,
                before,
                after: self.traj.state,
                detail,
            })));
        }
        Ok(())
    }

    pub fn run_until(&mut self, horizon: f64) -> Result<(), SimError> {
        while self.traj.time < horizon {
            self.step()?;
        }
        Ok(())
    }

    pub fn into_trajectory(self) -> CoupledTrajectory {
        self.traj
    }
}

fn apply_clock(traj: &mut CoupledTrajectory, clock: Clock) -> bool {
    let s = &mut traj.state;
    let mut changed = false;
    if clock.channel != Channel::PrimeOnly {
        if let Some((slot, sign)) = clock.mv.apply(&mut s.eta) {
            traj.crossings_low[slot] += sign;
            match clock.mv {
                Move::Inject => s.x -= 1,
                Move::Extract => s.y += 1,
                _ => {}
            }
            changed = true;
        }
    }
    if clock.channel != Channel::PlainOnly {
        if let Some((slot, sign)) = clock.mv.apply(&mut s.eta_prime) {
            traj.crossings_high[slot] += sign;
            match clock.mv {
                Move::Inject => s.x += 1,
                Move::Extract => s.y -= 1,
                _ => {}
            }
            changed = true;
        }
    }
    changed
}

/// State invariants, `N' - N = x + Σ_{j<=k}[η - η']` on every bond and
/// `N' >= N`.
fn verify(traj: &CoupledTrajectory) -> Result<(), String> {
    traj.state.check()?;
    let pre = traj.state.prefixes();
    for (j, &p) in pre.iter().enumerate() {
        let diff = traj.crossings_high[j] - traj.crossings_low[j];
        if diff != p {
            return Err(format!(
                "N' - N = {diff} but x + Σ[η - η'] = {p} at position {}",
                j as i64 - 1
            ));
        }
        if diff < 0 {
            return Err(format!("N' < N at position {}", j as i64 - 1));
        }
    }
    Ok(())
}

/// Run the coupled pair from `(0, η, η, 0)` with the basic table, checking
/// every invariant after every event.
pub fn coupled_run(
    spec: &ChainSpec,
    env_low: &Environment,
    env_high: &Environment,
    seed: u64,
    horizon: f64,
) -> Result<CoupledTrajectory, SimError> {
    coupled_run_with(spec, env_low, env_high, seed, horizon, CouplingTable::Basic)
}

pub fn coupled_run_with(
    spec: &ChainSpec,
    env_low: &Environment,
    env_high: &Environment,
    seed: u64,
    horizon: f64,
    table: CouplingTable,
) -> Result<CoupledTrajectory, SimError> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(SimError::InvalidHorizon(horizon));
    }
    let mut sim = CoupledSimulator::new(spec, env_low, env_high, seed, table)?;
    sim.run_until(horizon)?;
    Ok(sim.into_trajectory())
}

/// `f`: sites where the copies differ. `g`: strict sign changes along
/// `η'(k) - η(k)` with zeros skipped.
pub fn discrepancy_observables(eta: &Configuration, eta_prime: &Configuration) -> (u32, u32) {
    assert_eq!(
        eta.len(),
        eta_prime.len(),
        "configurations of different lengths"
    );
    let f = (eta.bits ^ eta_prime.bits).count_ones();
    let mut g = 0;
    let mut last = 0i8;
    for k in 0..eta.len() {
        let d = eta_prime.get(k) as i8 - eta.get(k) as i8;
        if d != 0 {
            if last != 0 && d != last {
                g += 1;
            }
            last = d;
        }
    }
    (f, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::{flux_exact, stationary};

    fn cfg(s: &str) -> Configuration {
        Configuration::from_label(s).unwrap()
    }

    #[test]
    fn discrepancy_examples() {
        assert_eq!(discrepancy_observables(&cfg("0110"), &cfg("0110")), (0, 0));
        assert_eq!(discrepancy_observables(&cfg("1010"), &cfg("0101")), (4, 3));
        assert_eq!(discrepancy_observables(&cfg("0011"), &cfg("1100")), (4, 1));
        assert_eq!(discrepancy_observables(&cfg("1000"), &cfg("0001")), (2, 1));
    }

    #[test]
    fn configuration_labels() {
        let c = cfg("0110");
        assert_eq!(c.bits(), 0b0110);
        assert_eq!(c.to_string(), "0110");
        assert_eq!(c.particles(), 2);
        assert!(Configuration::from_label("01x").is_none());
    }

    #[test]
    fn closed_chain_conserves_particles() {
        let env = Environment::new(
            -1,
            vec![0.5, 0.3, 0.8, 0.6, 0.2, 0.7, 0.4],
            crate::env::Source::Deterministic,
        )
        .unwrap();
        let spec = ChainSpec::closed(env, 0, 5, 3).unwrap();
        let mut sim = Simulator::new(&spec, 5).unwrap().record_events();
        for t in 1..200 {
            sim.run_until(t as f64);
            assert_eq!(sim.trajectory().config.particles(), 3);
        }
        let tr = sim.into_trajectory();
        assert!(tr.events > 100);
        assert_eq!(tr.crossings[0], 0);
        assert_eq!(tr.crossings[6], 0);
        assert_eq!(tr.log.as_ref().unwrap().len() as u64, tr.events);
    }

    #[test]
    fn crossings_balance_particle_count() {
        let env = Environment::homogeneous(0.65, -1, 5).unwrap();
        let spec = ChainSpec::driven(env, 0, 5).unwrap();
        let tr = gillespie_run(&spec, 3, 500.0).unwrap();
        // particles in [m, m+k] = injections - crossings of bond m+k
        for k in 0..6 {
            let inside: i64 = (0..=k).map(|j| tr.config.get(j) as i64).sum();
            assert_eq!(inside, tr.crossings[0] - tr.crossings[k + 1]);
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let env = Environment::homogeneous(0.6, 0, 4).unwrap();
        let spec = ChainSpec::driven(env, 1, 4).unwrap();
        let a = gillespie_run(&spec, 11, 50.0).unwrap();
        let b = gillespie_run(&spec, 11, 50.0).unwrap();
        let c = gillespie_run(&spec, 12, 50.0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.crossings, c.crossings);
    }

    #[test]
    fn single_site_half_occupied() {
        let env = Environment::homogeneous(0.6, -1, 0).unwrap();
        let spec = ChainSpec::driven(env, 0, 0).unwrap();
        let horizon = 20_000.0;
        let mut sim = Simulator::new(&spec, 2).unwrap();
        let mut fractions = Vec::new();
        let mut last = 0.0;
        for b in 1..=20 {
            sim.run_until(horizon * b as f64 / 20.0);
            let occ = sim.trajectory().occupation[0];
            fractions.push((occ - last) / (horizon / 20.0));
            last = occ;
        }
        let mean = fractions.iter().sum::<f64>() / 20.0;
        let se = (fractions.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / 19.0 / 20.0).sqrt();
        assert!((mean - 0.5).abs() <= 3.0 * se, "{mean} ± {se}");
    }

    #[test]
    fn symmetric_driven_flux_vanishes_in_probability() {
        // p ≡ 0.5 still injects at 0.5 and extracts at 0.5; compare with exact
        let env = Environment::homogeneous(0.5, -1, 3).unwrap();
        let spec = ChainSpec::driven(env, 0, 3).unwrap();
        let exact = flux_exact(&stationary(&spec).unwrap()).value;
        let est = flux_mc(&spec, 4, 20_000.0, 1).unwrap();
        assert!((est.mean - exact).abs() <= 3.0 * est.std_error);
    }

    #[test]
    fn mc_matches_exact_l6() {
        let env = Environment::homogeneous(0.6, 0, 6).unwrap();
        let spec = ChainSpec::driven(env, 1, 6).unwrap();
        let exact = flux_exact(&stationary(&spec).unwrap()).value;
        let est = flux_mc(&spec, 0, 20_000.0, 3).unwrap();
        assert!(
            (est.mean - exact).abs() <= 3.0 * est.std_error,
            "{est:?} vs {exact}"
        );
        assert_eq!(est.batches, 20);
    }

    #[test]
    fn closed_mc_flux_near_zero() {
        let env = Environment::homogeneous(0.7, -1, 5).unwrap();
        let spec = ChainSpec::closed(env, 0, 5, 3).unwrap();
        let est = flux_mc(&spec, 1, 5_000.0, 2).unwrap();
        assert!(est.mean.abs() <= 3.0 * est.std_error.max(1e-3));
    }

    #[test]
    fn flux_mc_argument_errors() {
        let env = Environment::homogeneous(0.6, 0, 4).unwrap();
        let spec = ChainSpec::driven(env, 1, 4).unwrap();
        assert!(matches!(
            flux_mc(&spec, 0, 10.0, 2),
            Err(SimError::HorizonTooShort { .. })
        ));
        assert!(matches!(
            flux_mc(&spec, 0, 100.0, 7),
            Err(SimError::BondOutOfRange { .. })
        ));
        assert!(matches!(
            flux_mc(&spec, 0, -1.0, 2),
            Err(SimError::InvalidHorizon(_))
        ));
        let opts = FluxMcOptions {
            burn_in: 0.1,
            batches: 5,
        };
        assert_eq!(
            flux_mc_with(&spec, 0, 100.0, 2, opts),
            Err(SimError::TooFewBatches(5))
        );
        assert!(flux_mc(&spec, 0, 100.0, 0).is_ok());
        assert!(flux_mc(&spec, 0, 100.0, 4).is_ok());
    }

    #[test]
    fn event_log_csv() {
        let env = Environment::homogeneous(0.6, 0, 2).unwrap();
        let spec = ChainSpec::driven(env, 1, 2).unwrap();
        let mut sim = Simulator::new(&spec, 0).unwrap().record_events();
        sim.run_until(20.0);
        let tr = sim.into_trajectory();
        let csv = events_to_csv(tr.log.as_ref().unwrap());
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("time,site,kind"));
        let first = lines.next().unwrap();
        assert!(first.ends_with(",0,inject"), "{first}");
        for line in lines {
            let kind = line.rsplit(',').next().unwrap();
            assert!(["right", "left", "inject", "extract"].contains(&kind));
        }
    }

    fn pair(lo: f64, hi: f64) -> (ChainSpec, Environment, Environment) {
        let low = Environment::homogeneous(lo, 0, 5).unwrap();
        let high = Environment::homogeneous(hi, 0, 5).unwrap();
        (ChainSpec::driven(low.clone(), 1, 4).unwrap(), low, high)
    }

    #[test]
    fn equal_environments_collapse() {
        let (spec, low, _) = pair(0.6, 0.6);
        let mut sim = CoupledSimulator::new(&spec, &low, &low, 3, CouplingTable::Basic).unwrap();
        while sim.trajectory().time < 500.0 {
            sim.step().unwrap();
            let s = sim.trajectory().state;
            assert_eq!(s.eta, s.eta_prime);
            assert_eq!((s.x, s.y), (0, 0));
        }
        let tr = sim.into_trajectory();
        assert_eq!(tr.crossings_low, tr.crossings_high);
    }

    #[test]
    fn coupled_invariants_hold() {
        let (spec, low, high) = pair(0.6, 0.7);
        for seed in 0..5 {
            let tr = coupled_run(&spec, &low, &high, seed, 1_000.0).unwrap();
            assert!(tr.events > 1_000);
            assert!(tr
                .crossings_high
                .iter()
                .zip(&tr.crossings_low)
                .all(|(h, l)| h >= l));
        }
    }

    #[test]
    fn coupled_log_uses_channel_kinds() {
        let (spec, low, high) = pair(0.4, 0.7);
        let mut sim = CoupledSimulator::new(&spec, &low, &high, 1, CouplingTable::Basic)
            .unwrap()
            .record_events();
        sim.run_until(100.0).unwrap();
        let tr = sim.into_trajectory();
        let log = tr.log.unwrap();
        assert_eq!(log.len() as u64, tr.events);
        for kind in ["joint", "prime-only", "plain-only"] {
            assert!(log.iter().any(|e| e.kind == kind), "{kind}");
        }
    }

    #[test]
    fn swapped_table_is_caught() {
        let (spec, low, _) = pair(0.5, 0.5);
        let high = low.with_p(0, 0.8).unwrap();
        let err = coupled_run_with(
            &spec,
            &low,
            &high,
            0,
            1_000.0,
            CouplingTable::SwappedResidual,
        )
        .unwrap_err();
        match err {
            SimError::Violation(v) => {
                assert_eq!(v.clock.mv, Move::Inject);
                assert_eq!(v.clock.channel, Channel::PlainOnly);
                assert!(v.detail.contains("prefix"), "{}", v.detail);
                assert!(v.to_string().contains("plain-only inject"));
            }
            other => panic!("expected violation, got {other:?}"),
        }
        for seed in 0..5 {
            let (spec, low, high) = pair(0.6, 0.7);
            let r = coupled_run_with(
                &spec,
                &low,
                &high,
                seed,
                1_000.0,
                CouplingTable::SwappedResidual,
            );
            assert!(matches!(r, Err(SimError::Violation(_))), "seed {seed}");
        }
    }

    #[test]
    fn unordered_environments_rejected() {
        let (spec, low, high) = pair(0.6, 0.7);
        let bent = high.with_p(2, 0.5).unwrap();
        assert!(matches!(
            coupled_run(&spec, &low, &bent, 0, 10.0),
            Err(SimError::NotOrdered { site: 2, .. })
        ));
    }

    /// Every state `(x, η, η', y)` on `L` sites satisfying both invariants,
    /// with `|x|, |y|` up to `L + 1`.
    fn admissible(len: usize) -> Vec<CoupledState> {
        let mut out = Vec::new();
        let b = len as i64 + 1;
        for e in 0..1u64 << len {
            for ep in 0..1u64 << len {
                for x in 0..=b {
                    for y in -b..=0 {
                        let s = CoupledState {
                            x,
                            eta: Configuration::from_bits(e, len),
                            eta_prime: Configuration::from_bits(ep, len),
                            y,
                        };
                        if s.check().is_ok() {
                            out.push(s);
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn every_transition_preserves_invariants() {
        for len in 1..=4 {
            let low = Environment::homogeneous(0.4, 0, len as i64 + 1).unwrap();
            let high = Environment::homogeneous(0.7, 0, len as i64 + 1).unwrap();
            let spec = ChainSpec::driven(low.clone(), 1, len as i64).unwrap();
            let clocks = CouplingTable::Basic.clocks(&spec, &low, &high);
            assert_eq!(clocks.len(), 4 * (len - 1) + 4);
            for s in admissible(len) {
                for &c in &clocks {
                    let mut tr = CoupledTrajectory {
                        seed: 0,
                        time: 0.0,
                        state: s,
                        crossings_low: vec![0; len + 1],
                        crossings_high: s.prefixes(),
                        events: 0,
                        log: None,
                    };
                    apply_clock(&mut tr, c);
                    verify(&tr).unwrap_or_else(|e| panic!("{s} under {c:?}: {e}"));
                }
            }
        }
    }

    #[test]
    fn same_environment_never_creates_discrepancies() {
        // the basic coupling of two copies of one process, interior moves only
        for len in 2..=4 {
            let env = Environment::homogeneous(0.6, 0, len as i64 + 1).unwrap();
            let spec = ChainSpec::driven(env.clone(), 1, len as i64).unwrap();
            let clocks: Vec<Clock> = CouplingTable::Basic
                .clocks(&spec, &env, &env)
                .into_iter()
                .filter(|c| matches!(c.mv, Move::Right(_) | Move::Left(_)))
                .collect();
            assert!(clocks.iter().all(|c| c.channel == Channel::Joint));
            for e in 0..1u64 << len {
                for ep in 0..1u64 << len {
                    let (a, b) = (
                        Configuration::from_bits(e, len),
                        Configuration::from_bits(ep, len),
                    );
                    let (f0, g0) = discrepancy_observables(&a, &b);
                    for c in &clocks {
                        let (mut a2, mut b2) = (a, b);
                        c.mv.apply(&mut a2);
                        c.mv.apply(&mut b2);
                        let (f1, g1) = discrepancy_observables(&a2, &b2);
                        assert!(f1 <= f0, "{a}/{b} -> {a2}/{b2}");
                        if g0 <= 1 {
                            assert!(g1 <= g0, "{a}/{b} -> {a2}/{b2}");
                        }
                    }
                }
            }
        }
    }

    fn occupation_by_batches(
        mut fractions: impl FnMut(f64, f64) -> Vec<f64>,
        horizon: f64,
    ) -> Vec<(f64, f64)> {
        let width = horizon / 20.0;
        let batches: Vec<Vec<f64>> = (0..20)
            .map(|b| fractions(b as f64 * width, (b + 1) as f64 * width))
            .collect();
        (0..batches[0].len())
            .map(|k| {
                let xs: Vec<f64> = batches.iter().map(|b| b[k]).collect();
                let mean = xs.iter().sum::<f64>() / 20.0;
                let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 19.0;
                (mean, (var / 20.0).sqrt())
            })
            .collect()
    }

    #[test]
    fn coupled_marginals_match_single_chains() {
        let low = Environment::homogeneous(0.55, 0, 5).unwrap();
        let high = Environment::homogeneous(0.7, 0, 5).unwrap();
        let spec = ChainSpec::driven(low.clone(), 1, 4).unwrap();
        let horizon = 20_000.0;
        let mut sim = CoupledSimulator::new(&spec, &low, &high, 8, CouplingTable::Basic).unwrap();
        // occupation times of both copies, integrated event by event
        let mut occ = [vec![vec![0.0; 4]; 20], vec![vec![0.0; 4]; 20]];
        let width = horizon / 20.0;
        let mut t = 0.0;
        let mut state = sim.trajectory().state;
        while t < horizon {
            sim.step().unwrap();
            let next = sim.trajectory().time.min(horizon);
            let mut a = t;
            while a < next {
                let b = ((a / width).floor() as usize).min(19);
                let end = next.min((b + 1) as f64 * width);
                let [lo_occ, hi_occ] = &mut occ;
                for (k, (x, y)) in lo_occ[b].iter_mut().zip(&mut hi_occ[b]).enumerate() {
                    *x += (end - a) * state.eta.get(k) as u8 as f64;
                    *y += (end - a) * state.eta_prime.get(k) as u8 as f64;
                }
                a = end;
            }
            t = next;
            state = sim.trajectory().state;
        }
        for (copy, env) in [(0, &low), (1, &high)] {
            let coupled = occupation_by_batches(
                |s, _| {
                    occ[copy][(s / width).round() as usize]
                        .iter()
                        .map(|v| v / width)
                        .collect()
                },
                horizon,
            );
            let single_spec = ChainSpec::driven(env.clone(), 1, 4).unwrap();
            let mut single = Simulator::new(&single_spec, 100 + copy as u64).unwrap();
            let single = occupation_by_batches(
                |_, e| {
                    let before = single.trajectory().occupation.clone();
                    single.run_until(e);
                    single
                        .trajectory()
                        .occupation
                        .iter()
                        .zip(&before)
                        .map(|(a, b)| (a - b) / width)
                        .collect()
                },
                horizon,
            );
            for k in 0..4 {
                let (m1, s1) = coupled[k];
                let (m2, s2) = single[k];
                assert!(
                    (m1 - m2).abs() <= 4.0 * (s1 * s1 + s2 * s2).sqrt(),
                    "copy {copy} site {k}: {m1} vs {m2}"
                );
            }
        }
    }
}
