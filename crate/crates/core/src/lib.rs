//! Numerical laboratory for the large-time behavior of degenerate viscous
//! Hamilton–Jacobi equations on the torus.
//!
//! The pipeline regularizes the degenerate equation with a small uniform
//! viscosity, solves it with a monotone IMEX scheme ([`forward`]), computes
//! ergodic pairs ([`ergodic`]), propagates the adjoint density backward with
//! the exact transpose of the discrete linearization ([`adjoint`]), and
//! evaluates the integral identities and estimates on the results
//! ([`analysis`]).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adjoint;
pub mod analysis;
pub mod ergodic;
mod error;
pub mod forward;
pub mod grid;
pub mod linalg;
pub mod problem;

pub use adjoint::{linearize, solve_adjoint, AdjointDensity, Linearization, LinearizedStep};
pub use analysis::{EnergyTrace, EstimateReport, RateFit};
pub use ergodic::{solve_ergodic, viscosity_sweep, ErgodicOptions, ErgodicSolution, SweepTable};
pub use error::{Error, Result};
pub use forward::{solve_cauchy, SolveOptions, SolveReport, Trajectory};
pub use grid::{MatrixField, PeriodicGrid, ScalarField, VectorField};
pub use problem::{CouplingMatrix, DiffusionSpec, HamiltonianSpec, ProblemSpec, Profile, TrigPoly, ValidationReport};
