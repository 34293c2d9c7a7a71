//! Criterion benchmarks for the exact solver, the simulators and the
//! independent-walker solver live in `benches/`.
