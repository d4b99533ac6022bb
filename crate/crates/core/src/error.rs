use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("level {level} exceeds the configured maximum level {max}")]
    LevelOutOfRange { level: usize, max: usize },

    #[error("parameter {theta:?} lies outside the prior support")]
    Domain { theta: Vec<f64> },

    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("finite-difference stencil leaves the support in dimension {dim} at {theta:?}")]
    Stencil { dim: usize, theta: Vec<f64> },

    #[error("matrix is not symmetric positive definite: {context}")]
    Decomposition { context: String },

    #[error("Laplace Hessian is not SPD; null direction {direction:?} (eigenvalue {eigenvalue:e})")]
    SingularHessian { direction: Vec<f64>, eigenvalue: f64 },

    #[error("MAP search did not converge in {iterations} iterations (gradient norm {grad_norm:e})")]
    MapNotConverged {
        best: Vec<f64>,
        grad_norm: f64,
        iterations: usize,
    },

    #[error("all inner terms of the evidence estimate have zero mass")]
    EvidenceUnderflow,

    #[error("{rejected} of {total} outer samples were rejected for evidence underflow")]
    TooManyRejections { rejected: usize, total: usize },

    #[error("FEM solve failed: {0}")]
    Solver(String),

    #[error("rate estimation failed: {0}")]
    RateEstimation(String),

    /// Level-independent model: every level difference vanishes identically.
    #[error("degenerate hierarchy: all level differences are zero")]
    DegenerateHierarchy,

    #[error("resource limit: {0}")]
    Resource(String),

    #[error("index set is not downward closed: {0:?} is missing")]
    NotDownwardClosed(Vec<u32>),

    #[error("invalid configuration: {0}")]
    Config(String),
}
