//! The five verbs. Rows are computed in parallel and sorted before writing,
//! so output bytes depend only on the config.

use std::path::Path;

use exclusion_core::exact::{flux_exact, stationary_with, SolverOptions};
use exclusion_core::free::{self, FluxVerdict};
use exclusion_core::sim;
use exclusion_core::{classify, pi_profile, Boundary, ChainSpec, Environment};
use rayon::prelude::*;

use crate::config::{BoundaryKind, LoadedConfig};
use crate::{num, opt_num, CliError, Status, Table};

/// Margin below which an audit counts a flux decrease.
pub const MONOTONE_TOLERANCE: f64 = 1e-12;

fn seeds_comment(seeds: &[u64]) -> String {
    let list: Vec<String> = seeds.iter().map(u64::to_string).collect();
    format!("seeds={}", list.join(" "))
}

fn driven_spec(env: Environment, len: usize) -> Result<ChainSpec, CliError> {
    Ok(ChainSpec::driven(env, 1, len as i64)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum RowMode {
    Exact,
    Mc,
}

struct ScanRow {
    len: usize,
    seed: u64,
    mode: RowMode,
    flux: Option<f64>,
    std_error: Option<f64>,
    residual: Option<f64>,
    spread: Option<f64>,
    error: String,
}

/// Flux for every `(L, seed)`: exact rows carry the solver residual and bond
/// spread, Monte Carlo rows a batch-means standard error.
pub fn scan_flux(loaded: &LoadedConfig, out: &Path) -> Result<Status, CliError> {
    let cfg = &loaded.config;
    let scan = cfg.section(&cfg.scan, "scan")?;
    scan.validate(&cfg.environment)?;
    let seeds = if scan.mode.mc() {
        scan.seeds.list()
    } else {
        scan.seeds.for_env(&cfg.environment)?
    };
    let mut tasks = Vec::new();
    for &len in &scan.sizes {
        for &seed in &seeds {
            if scan.mode.exact() {
                tasks.push((len, seed, RowMode::Exact));
            }
            if scan.mode.mc() {
                tasks.push((len, seed, RowMode::Mc));
            }
        }
    }
    let opts = SolverOptions {
        max_len: scan.max_len,
        ..SolverOptions::default()
    };
    let mut rows: Vec<ScanRow> = tasks
        .par_iter()
        .map(|&(len, seed, mode)| {
            let mut row = ScanRow {
                len,
                seed,
                mode,
                flux: None,
                std_error: None,
                residual: None,
                spread: None,
                error: String::new(),
            };
            let result = (|| -> Result<(), CliError> {
                let env = cfg.environment.build(seed, 0, len as i64)?;
                let boundary = match scan.boundary {
                    BoundaryKind::Driven => Boundary::Driven,
                    BoundaryKind::Closed => Boundary::Closed {
                        particles: scan.particles.unwrap_or(len / 2),
                    },
                };
                let spec = ChainSpec::new(env, 1, len as i64, boundary)?;
                match mode {
                    RowMode::Exact => {
                        let d = stationary_with(&spec, &opts)?;
                        let f = flux_exact(&d);
                        row.flux = Some(f.value);
                        row.residual = Some(d.residual);
                        row.spread = Some(f.spread);
                    }
                    RowMode::Mc => {
                        let est = sim::flux_mc(&spec, seed, scan.horizon, (len / 2) as i64)?;
                        row.flux = Some(est.mean);
                        row.std_error = Some(est.std_error);
                    }
                }
                Ok(())
            })();
            if let Err(e) = result {
                row.error = e.to_string();
            }
            row
        })
        .collect();
    rows.sort_by_key(|r| (r.len, r.seed, r.mode));

    let mut table = Table::new(
        loaded,
        "scan-flux",
        &[
            "L",
            "seed",
            "mode",
            "flux",
            "std_error",
            "residual",
            "spread",
            "error",
        ],
    );
    table.comment(seeds_comment(&seeds));
    table.comment(format!("horizon={}", num(scan.horizon)));
    let failed = rows.iter().filter(|r| !r.error.is_empty()).count();
    for r in &rows {
        table.push(vec![
            r.len.to_string(),
            r.seed.to_string(),
            if r.mode == RowMode::Exact {
                "exact"
            } else {
                "mc"
            }
            .into(),
            opt_num(r.flux),
            opt_num(r.std_error),
            opt_num(r.residual),
            opt_num(r.spread),
            r.error.clone(),
        ]);
    }
    let path = table.write(out, "flux_scan.csv")?;
    Ok(Status::Ok {
        summary: format!(
            "{} rows ({} with errors) written to {}",
            rows.len(),
            failed,
            path.display()
        ),
    })
}

struct MonotoneRow {
    seed: u64,
    site: i64,
    p_before: f64,
    flux_before: Option<f64>,
    flux_after: Option<f64>,
    error: String,
}

impl MonotoneRow {
    fn margin(&self) -> Option<f64> {
        Some(self.flux_after? - self.flux_before?)
    }
}

/// Raise each rate by `delta` in turn and record the change of exact flux.
pub fn audit_monotone(loaded: &LoadedConfig, out: &Path) -> Result<Status, CliError> {
    let cfg = &loaded.config;
    let mono = cfg.section(&cfg.monotone, "monotone")?;
    let len = mono.size;
    if len == 0 || len > mono.max_len {
        return Err(CliError::Config(format!(
            "size {len} must lie in 1..={}",
            mono.max_len
        )));
    }
    if mono.delta.is_nan() || mono.delta < 0.0 {
        return Err(CliError::Config(format!(
            "delta must be nonnegative, got {}",
            mono.delta
        )));
    }
    let seeds = mono.seeds.for_env(&cfg.environment)?;
    let sites: Vec<i64> = mono
        .sites
        .clone()
        .unwrap_or_else(|| (0..=len as i64).collect());
    if let Some(s) = sites.iter().find(|&&s| !(0..=len as i64).contains(&s)) {
        return Err(CliError::Config(format!("site {s} is outside [0, {len}]")));
    }
    let opts = SolverOptions {
        max_len: mono.max_len,
        ..SolverOptions::default()
    };
    let flux_of = |env: Environment| -> Result<f64, CliError> {
        let d = stationary_with(&driven_spec(env, len)?, &opts)?;
        Ok(flux_exact(&d).value)
    };
    type Base = (u64, Result<(Environment, f64), String>);
    let bases: Vec<Base> = seeds
        .par_iter()
        .map(|&seed| {
            let r = cfg
                .environment
                .build(seed, 0, len as i64)
                .and_then(|env| flux_of(env.clone()).map(|f| (env, f)))
                .map_err(|e| e.to_string());
            (seed, r)
        })
        .collect();
    let tasks: Vec<(usize, i64)> = (0..bases.len())
        .flat_map(|b| sites.iter().map(move |&s| (b, s)))
        .collect();
    let mut rows: Vec<MonotoneRow> = tasks
        .par_iter()
        .map(|&(b, site)| {
            let (seed, base) = &bases[b];
            let mut row = MonotoneRow {
                seed: *seed,
                site,
                p_before: f64::NAN,
                flux_before: None,
                flux_after: None,
                error: String::new(),
            };
            match base {
                Err(e) => row.error = e.clone(),
                Ok((env, f)) => {
                    row.p_before = env.p(site);
                    row.flux_before = Some(*f);
                    match env
                        .with_p(site, env.p(site) + mono.delta)
                        .map_err(CliError::from)
                        .and_then(flux_of)
                    {
                        Ok(after) => row.flux_after = Some(after),
                        Err(e) => row.error = e.to_string(),
                    }
                }
            }
            row
        })
        .collect();
    rows.sort_by_key(|r| (r.seed, r.site));

    let mut table = Table::new(
        loaded,
        "audit-monotone",
        &[
            "seed",
            "site",
            "p_before",
            "flux_before",
            "flux_after",
            "margin",
            "error",
        ],
    );
    table.comment(seeds_comment(&seeds));
    table.comment(format!(
        "delta={} tolerance={}",
        num(mono.delta),
        num(MONOTONE_TOLERANCE)
    ));
    for r in &rows {
        table.push(vec![
            r.seed.to_string(),
            r.site.to_string(),
            if r.p_before.is_nan() {
                String::new()
            } else {
                num(r.p_before)
            },
            opt_num(r.flux_before),
            opt_num(r.flux_after),
            opt_num(r.margin()),
            r.error.clone(),
        ]);
    }
    let path = table.write(out, "monotone_audit.csv")?;
    let worst = rows
        .iter()
        .filter_map(|r| r.margin().map(|m| (m, r)))
        .min_by(|a, b| a.0.total_cmp(&b.0));
    let errors = rows.iter().filter(|r| !r.error.is_empty()).count();
    match worst {
        Some((m, r)) if m < -MONOTONE_TOLERANCE => Ok(Status::Violation {
            summary: format!(
                "flux decreased by {:e} when raising p at site {} (seed {}); table in {}",
                -m,
                r.site,
                r.seed,
                path.display()
            ),
        }),
        _ => Ok(Status::Ok {
            summary: format!(
                "{} perturbations, min margin {}, {} errors; table in {}",
                rows.len(),
                worst
                    .map(|w| format!("{:e}", w.0))
                    .unwrap_or_else(|| "n/a".into()),
                errors,
                path.display()
            ),
        }),
    }
}

/// Run the coupled pair for every seed, checking every invariant at every
/// event.
pub fn audit_coupling(loaded: &LoadedConfig, out: &Path) -> Result<Status, CliError> {
    let cfg = &loaded.config;
    let c = cfg.section(&cfg.coupling, "coupling")?;
    if c.size == 0 || c.size > sim::MAX_SIM_LEN {
        return Err(CliError::Config(format!(
            "size must lie in 1..={}",
            sim::MAX_SIM_LEN
        )));
    }
    if c.shift.is_nan() || c.shift < 0.0 {
        return Err(CliError::Config(format!(
            "shift must be nonnegative, got {}",
            c.shift
        )));
    }
    let seeds = c.seeds.list();
    if seeds.is_empty() {
        return Err(CliError::Config("seed list is empty".into()));
    }
    let len = c.size;
    let mut results: Vec<(u64, Result<sim::CoupledTrajectory, String>)> = seeds
        .par_iter()
        .map(|&seed| {
            let run = (|| -> Result<sim::CoupledTrajectory, CliError> {
                let low = cfg.environment.build(seed, 0, len as i64)?;
                let high = low.shifted(c.shift)?;
                let spec = driven_spec(low.clone(), len)?;
                Ok(sim::coupled_run_with(
                    &spec,
                    &low,
                    &high,
                    seed,
                    c.horizon,
                    c.table.into(),
                )?)
            })();
            (seed, run.map_err(|e| e.to_string()))
        })
        .collect();
    results.sort_by_key(|r| r.0);

    let mut table = Table::new(
        loaded,
        "audit-coupling",
        &[
            "seed",
            "events",
            "status",
            "injections_low",
            "injections_high",
            "extractions_low",
            "extractions_high",
            "detail",
        ],
    );
    table.comment(seeds_comment(&seeds));
    table.comment(format!(
        "size={len} shift={} horizon={} table={:?}",
        num(c.shift),
        num(c.horizon),
        c.table
    ));
    let mut events = 0;
    let mut first_failure = None;
    let mut counters_equal = true;
    for (seed, r) in &results {
        match r {
            Ok(t) => {
                events += t.events;
                counters_equal &= t.crossings_low == t.crossings_high;
                table.push(vec![
                    seed.to_string(),
                    t.events.to_string(),
                    "pass".into(),
                    t.crossings_low[0].to_string(),
                    t.crossings_high[0].to_string(),
                    t.crossings_low[len].to_string(),
                    t.crossings_high[len].to_string(),
                    String::new(),
                ]);
            }
            Err(e) => {
                first_failure.get_or_insert_with(|| e.clone());
                table.push(vec![
                    seed.to_string(),
                    String::new(),
                    "fail".into(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    e.clone(),
                ]);
            }
        }
    }
    let path = table.write(out, "coupling_audit.csv")?;
    Ok(match first_failure {
        Some(e) => Status::Violation {
            summary: format!("coupling audit failed: {e}; table in {}", path.display()),
        },
        None => Status::Ok {
            summary: format!(
                "coupling audit passed: {events} events over {} seeds{}; table in {}",
                seeds.len(),
                if counters_equal {
                    ", all counters equal"
                } else {
                    ""
                },
                path.display()
            ),
        },
    })
}

/// Regime of the reversible measures of each sampled environment.
pub fn classify_env(loaded: &LoadedConfig, out: &Path) -> Result<Status, CliError> {
    let cfg = &loaded.config;
    let c = cfg.section(&cfg.classify, "classify")?;
    let seeds = c.seeds.for_env(&cfg.environment)?;
    let mut rows: Vec<(u64, Result<Vec<String>, String>)> = seeds
        .par_iter()
        .map(|&seed| {
            let r = (|| -> Result<Vec<String>, CliError> {
                let env = cfg.environment.build(seed, c.lo, c.hi)?;
                let prof = pi_profile(&env, 1.0)?;
                let v = classify(&prof, c.threshold)?;
                Ok(vec![
                    v.divergent.to_string(),
                    v.case.label().into(),
                    num(v.partial_sums.variance),
                    num(v.partial_sums.particles),
                    num(v.partial_sums.holes),
                    num(v.normalized_variance),
                ])
            })();
            (seed, r.map_err(|e| e.to_string()))
        })
        .collect();
    rows.sort_by_key(|r| r.0);
    let mut table = Table::new(
        loaded,
        "classify-env",
        &[
            "seed",
            "divergent",
            "case",
            "variance_sum",
            "particle_sum",
            "hole_sum",
            "normalized_variance",
            "error",
        ],
    );
    table.comment(seeds_comment(&seeds));
    table.comment(format!(
        "window=[{}, {}] threshold={}",
        c.lo,
        c.hi,
        num(c.threshold)
    ));
    let mut divergent = 0;
    for (seed, r) in &rows {
        let mut row = vec![seed.to_string()];
        match r {
            Ok(cols) => {
                divergent += (cols[0] == "true") as usize;
                row.extend(cols.iter().cloned());
                row.push(String::new());
            }
            Err(e) => {
                row.extend(std::iter::repeat_n(String::new(), 6));
                row.push(e.clone());
            }
        }
        table.push(row);
    }
    let path = table.write(out, "classify.csv")?;
    Ok(Status::Ok {
        summary: format!(
            "{divergent}/{} environments divergent; table in {}",
            rows.len(),
            path.display()
        ),
    })
}

struct SigmaRow {
    seed: u64,
    verdict: String,
    drift: Option<(f64, String)>,
    profile: Option<free::SigmaProfile>,
    error: String,
}

/// Invariant measure of independent walkers for each environment, with the
/// series verdict and the drift sign of the law.
pub fn sigma_solve(loaded: &LoadedConfig, out: &Path) -> Result<Status, CliError> {
    let cfg = &loaded.config;
    let c = cfg.section(&cfg.sigma, "sigma")?;
    let seeds = c.seeds.for_env(&cfg.environment)?;
    let mut rows: Vec<SigmaRow> = seeds
        .par_iter()
        .map(|&seed| {
            let mut row = SigmaRow {
                seed,
                verdict: String::new(),
                drift: None,
                profile: None,
                error: String::new(),
            };
            let r = (|| -> Result<(), CliError> {
                let env = cfg.environment.build(seed, c.lo, c.hi)?;
                let verdict = free::criterion(&env).ok().map(|v| v.verdict);
                row.verdict = verdict.map(|v| v.label().to_string()).unwrap_or_default();
                if let Some(law) = cfg.environment.law() {
                    let d = free::solomon_classify(&law, c.samples, seed)?;
                    row.drift = Some((d.mean, format!("{:?}", d.sign).to_lowercase()));
                }
                let profile = match (c.phi, verdict) {
                    (Some(phi), _) => free::solve_sigma(&env, phi, c.sigma_base)?,
                    (None, Some(FluxVerdict::PositiveFluxExists)) => {
                        free::positive_solution_witness(&env, &free::phi_grid(&env)).ok_or_else(
                            || CliError::Config("no positive flux on the grid".into()),
                        )?
                    }
                    (None, Some(FluxVerdict::NegativeFluxExists)) => {
                        let grid: Vec<f64> = free::phi_grid(&env).iter().map(|p| -p).collect();
                        free::positive_solution_witness(&env, &grid).ok_or_else(|| {
                            CliError::Config("no negative flux on the grid".into())
                        })?
                    }
                    _ => free::solve_sigma(&env, 0.0, c.sigma_base)?,
                };
                row.profile = Some(profile);
                Ok(())
            })();
            if let Err(e) = r {
                row.error = e.to_string();
            }
            row
        })
        .collect();
    rows.sort_by_key(|r| r.seed);
    let mut table = Table::new(
        loaded,
        "sigma-solve",
        &[
            "seed",
            "verdict",
            "drift_mean",
            "drift_sign",
            "phi",
            "invariance_residual",
            "flux_residual",
            "error",
        ],
    );
    table.comment(seeds_comment(&seeds));
    table.comment(format!("window=[{}, {}]", c.lo, c.hi));
    for r in &rows {
        let p = r.profile.as_ref();
        table.push(vec![
            r.seed.to_string(),
            r.verdict.clone(),
            opt_num(r.drift.as_ref().map(|d| d.0)),
            r.drift.as_ref().map(|d| d.1.clone()).unwrap_or_default(),
            opt_num(p.map(|p| p.flux)),
            opt_num(p.map(|p| p.invariance_residual())),
            opt_num(p.map(|p| p.flux_residual())),
            r.error.clone(),
        ]);
        if let Some(p) = p {
            let mut t = Table::new(loaded, "sigma-solve", &["site", "sigma"]);
            t.comment(format!("seed={} phi={}", r.seed, num(p.flux)));
            for (k, s) in p.sigma.iter().enumerate() {
                t.push(vec![(p.lo + k as i64).to_string(), num(*s)]);
            }
            t.write(out, &format!("sigma_seed{}.csv", r.seed))?;
        }
    }
    let path = table.write(out, "sigma_summary.csv")?;
    let solved = rows.iter().filter(|r| r.profile.is_some()).count();
    Ok(Status::Ok {
        summary: format!(
            "{solved}/{} profiles solved; summary in {}",
            rows.len(),
            path.display()
        ),
    })
}
