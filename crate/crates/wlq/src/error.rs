//! Error types shared across the library.
//!
//! Every failure names the violated contract and enough context (matrix
//! name, offending eigenvalue, step index) to act on it without a debugger.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum WlqError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("matrix {name} is not symmetric (relative asymmetry {asymmetry:.3e} > 1e-12)")]
    NotSymmetric { name: String, asymmetry: f64 },

    #[error("matrix {name} is not positive definite (smallest eigenvalue {min_eig:.6e})")]
    NotPositiveDefinite { name: String, min_eig: f64 },

    #[error("signal {name} is not weighted-square-integrable for E = {e}")]
    NonIntegrableSignal { name: String, e: f64 },

    #[error("unsupported signal kind: {0}")]
    UnsupportedSignalKind(String),

    #[error("exponent condition requires E > 0, got E = {0}")]
    NonpositiveE(f64),

    #[error("Lyapunov operator is singular (smallest pivot {pivot:.3e}); system admits no unique solution")]
    SingularOperator { pivot: f64 },

    #[error("problem size n = {n} exceeds the dense-solver limit n <= {limit}")]
    ProblemTooLarge { n: usize, limit: usize },

    #[error(
        "Monte Carlo integrand diverged at step {step} (|integrand| = {magnitude:.3e} > 1e12)"
    )]
    DivergenceDetected { step: usize, magnitude: f64 },

    #[error("no weighted stabilizer found after {attempts} attempts")]
    StabilizerNotFound { attempts: usize },

    #[error("no initial stabilizer available for the Riccati iteration: {0}")]
    NoInitialStabilizer(String),

    #[error("Riccati iteration diverged: residual grew for {0} consecutive steps")]
    IterationDiverged(usize),

    #[error("synthesized gain failed the weighted Lyapunov certificate: {0}")]
    NotCertified(String),

    #[error("closed-loop matrix for the affine adjoint equation is not Hurwitz (max Re(lambda) = {max_re:.6e})")]
    NotHurwitz { max_re: f64 },

    #[error("quadrature failed to converge for the affine adjoint equation: {0}")]
    QuadratureFailure(String),

    #[error("R + D'PD is singular; cannot form the affine control offset")]
    SingularRplus,

    #[error("operation requires a homogeneous problem (q = r = b = sigma = 0): {0}")]
    NotHomogeneous(String),

    #[error("state norm exceeded 1e12 at step {step} (path {path}); simulation aborted")]
    NumericalBlowup { step: usize, path: usize },

    #[error("weighted cost integrand fails to decay over the last quarter of the horizon (slope {slope:.3e} >= 0); increase T_max or check stability")]
    NonIntegrableTail { slope: f64 },

    #[error("infinite-horizon BSDE evaluation requires zero terminal data (G = 0, g = 0)")]
    HorizonRequired,

    #[error("optimality violated: perturbation {index} at eps = {eps} gave cost difference {delta:.6e} < -3 SE ({neg3se:.6e})")]
    OptimalityViolated {
        index: usize,
        eps: f64,
        delta: f64,
        neg3se: f64,
    },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("validation failed [{hypothesis}]: {detail}")]
    ValidationFailed { hypothesis: String, detail: String },

    #[error("problem file error: {0}")]
    ProblemFile(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, WlqError>;
