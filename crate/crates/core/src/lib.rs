//! Nearest-neighbor exclusion processes in inhomogeneous and random
//! environments.
//!
//! The crate is organized around the objects needed to check flux and
//! reversibility claims numerically on finite chains:
//!
//! * [`env`]: environments `{p_i}`, reversible profiles `π`, regime labels.
//! * [`exact`]: generator, exact stationary law and flux of a finite chain.
//! * [`sim`]: event-driven simulation of one chain and of the monotone
//!   coupling of two chains.
//! * [`free`]: invariant measures and flux of independent walkers.
//!
//! Sites of a chain on `[m, n]` are encoded little-endian: bit `k` of a state
//! index is the occupancy of site `m + k`.

pub mod env;
pub mod exact;
pub mod free;
pub mod rng;
pub mod series;
pub mod sim;

pub use env::{
    classify, pi_profile, DistSpec, EnvError, Environment, PiProfile, RegimeCase,
    RegimeClassification, Source,
};
pub use exact::{
    build_generator, conditioned_product_measure, detailed_balance_residual, flux_exact,
    flux_of_product, stationary, Boundary, ChainSpec, ExactError, FluxReport, Generator,
    SolverOptions, StationaryDistribution,
};
pub use free::{criterion, solomon_classify, solve_sigma, FluxCriterion, FreeError, SigmaProfile};
pub use sim::{
    coupled_run, discrepancy_observables, flux_mc, gillespie_run, Configuration, CoupledState,
    FluxEstimate, SimError, Trajectory,
};

/// Decimal rendering with 17 significant digits; parses back bit-exactly.
pub fn fmt_sig17(x: f64) -> String {
    format!("{x:.16e}")
}

#[cfg(test)]
mod tests {
    use super::fmt_sig17;

    #[test]
    fn sig17_round_trips() {
        for x in [0.1, 1.0 / 3.0, 6.02214076e23, 5e-324, 0.0, -2.5] {
            let s = fmt_sig17(x);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
        assert_eq!(fmt_sig17(0.5), "5.0000000000000000e-1");
    }
}
