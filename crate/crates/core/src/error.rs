use thiserror::Error;

/// Errors raised across model construction, linearization, eigen-analysis and simulation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("unknown signal `{0}`")]
    UnknownSignal(String),

    #[error("signal `{0}` is linked more than once")]
    DuplicateLink(String),

    #[error("full tensor needs N_v <= {limit}, model has N_v = {nv}")]
    TensorTooLarge { nv: usize, limit: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("point is not an equilibrium: residual norm {residual:.3e} exceeds {tol:.1e}{detail}")]
    NotEquilibrium {
        residual: f64,
        tol: f64,
        detail: String,
    },

    #[error("non-multilinear product: {0}")]
    NotMultilinear(String),

    #[error("invalid parameter `{name}` = {value}: {reason}")]
    InvalidParameter {
        name: String,
        value: f64,
        reason: &'static str,
    },

    #[error("singular pencil: det(lambda E - A) vanishes identically ({0})")]
    SingularPencil(String),

    #[error("algebraic block is not invertible: rank defect {defect} in {size}x{size} block")]
    AlgebraicRankDefect { defect: usize, size: usize },

    #[error("eigen decomposition failed: {0}")]
    Eigen(String),

    #[error("Newton iteration did not converge after {iterations} iterations (residual {residual:.3e}){detail}")]
    NewtonDivergence {
        iterations: usize,
        residual: f64,
        detail: String,
    },

    #[error("singular iteration matrix; deficient equations: {0}")]
    SingularIteration(String),

    #[error("step size underflow at t = {t:.6}: {reason}")]
    StepUnderflow { t: f64, reason: String },

    #[error("model is not square: {equations} equations for {unknowns} unknowns")]
    NotSquare { equations: usize, unknowns: usize },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
