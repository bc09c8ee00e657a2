use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("invalid space: {0}")]
    InvalidSpace(String),

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("size cap exceeded: {size} > {cap}")]
    SizeCap { size: usize, cap: usize },

    #[error("distance {value} exceeds pi + tolerance; clamping not permitted")]
    DiameterExceeded { value: f64 },

    #[error("graph is disconnected at bandwidth eps = {eps}")]
    Disconnected { eps: f64 },

    #[error("radial truncation violated: R_max = {r_max} < required {required}")]
    Truncation { r_max: f64, required: f64 },

    #[error("function is not {bound}-Lipschitz (ratio {ratio})")]
    Lipschitz { ratio: f64, bound: f64 },

    #[error("quadrature did not converge (estimated error {estimate})")]
    Quadrature { estimate: f64 },

    #[error("solver failed: {0}")]
    Solver(String),

    #[error("operation requires a flat (K = 0) cone, got K = {0}")]
    CurvedCone(f64),

    #[error("Wasserstein distance underflow between points {x} and {y}: {detail}")]
    Underflow { x: usize, y: usize, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
