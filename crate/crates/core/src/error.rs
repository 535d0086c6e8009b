use thiserror::Error;

/// Errors raised across the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("too few nodes on axis {axis}: {nodes} (need at least {min})")]
    TooFewNodes { axis: usize, nodes: usize, min: usize },
    #[error("degenerate extent on axis {axis}")]
    DegenerateExtent { axis: usize },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("point outside the grid extent: {0}")]
    OutsideDomain(String),
    #[error("point too close to the outer boundary for the requested stencil: {0}")]
    TooCloseToBoundary(String),
    #[error("Hessian requested on the singular line")]
    SingularLine,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("degenerate field: {0}")]
    DegenerateField(String),
    #[error("solver did not converge after {iterations} iterations (KKT residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("not a free-boundary candidate: {0}")]
    NotCandidate(String),
    #[error("domain exceeded: {0}")]
    DomainExceeded(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
