use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("hypothesis {hypothesis} violated: {witness}")]
    HypothesisViolation { hypothesis: String, witness: String },

    #[error("unstable step {step}: {reason}")]
    Stability { step: usize, reason: String },

    #[error("linear solve did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    LinearSolver { iterations: usize, residual: f64 },

    #[error("ergodic solve did not converge by t = {time}: last oscillation {oscillation:.3e}")]
    ErgodicNonConvergence { time: f64, oscillation: f64 },

    #[error("ergodic verification failed: residual {residual:.3e} exceeds {limit:.3e}")]
    ErgodicVerification { residual: f64, limit: f64 },

    #[error("adjoint conservation failure at step {step}: {reason}")]
    Conservation { step: usize, reason: String },

    #[error("mismatched inputs: {0}")]
    Mismatch(String),

    #[error("rate fit needs at least 3 valid points, got {0}")]
    InsufficientData(usize),
}
