//! Criterion benchmarks for the forward step, the adjoint step and the cell
//! solver; see `benches/solvers.rs`.
