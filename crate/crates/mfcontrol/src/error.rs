//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Failure modes of model validation, solvers and verification routines.
#[derive(Debug, Error)]
pub enum Error {
    /// A matrix or vector did not have the shape required by the problem
    /// dimensions.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// Ensemble weights failed normalization or positivity checks.
    #[error("invalid ensemble weights: {detail}")]
    Weights { detail: String },

    /// An input value was outside its admissible range.
    #[error("invalid argument for {context}: {detail}")]
    InvalidArgument {
        context: &'static str,
        detail: String,
    },

    /// The control Hessian was not positive definite at the evaluation point,
    /// so the Hamiltonian has no unique minimizer there.
    #[error("control cost is not strongly convex at the evaluation point: {detail}")]
    NotConvex { detail: String },

    /// Newton iteration for the control first-order condition did not reach
    /// the requested residual.
    #[error(
        "control minimization did not converge: residual {residual:.3e} after {iterations} iterations"
    )]
    NewtonDiverged { residual: f64, iterations: usize },

    /// A simulated state became non-finite.
    #[error("forward pass diverged at step {step}: non-finite state")]
    ForwardDiverged { step: usize },

    /// Picard iteration stopped contracting. The delta history records the
    /// sup-norm policy change per sweep for diagnosis.
    #[error("Picard iteration did not converge after {iterations} sweeps (last delta {last_delta:.3e})")]
    PicardDiverged {
        iterations: usize,
        last_delta: f64,
        deltas: Vec<f64>,
    },

    /// Continuation could not bridge two homotopy levels even after the
    /// allowed number of bisections.
    #[error(
        "continuation failed between coupling levels {rho_from:.4} and {rho_to:.4} at bisection depth {depth}"
    )]
    ContinuationFailed {
        rho_from: f64,
        rho_to: f64,
        depth: usize,
    },

    /// A regression system was too ill-conditioned to solve.
    #[error("least-squares regression failed: {detail}")]
    Regression { detail: String },

    /// The requested operation is not defined for this problem configuration.
    #[error("unsupported operation: {detail}")]
    Unsupported { detail: String },
}

impl Error {
    /// Shorthand used by validation code.
    pub fn dim(context: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Dimension {
            context,
            expected: expected.into(),
            got: got.into(),
        }
    }
}
