use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid fractional order: {0}")]
    FracOrder(String),
    #[error("invalid domain: {0}")]
    Domain(String),
    #[error("insufficient padding: {0}")]
    Padding(String),
    #[error("region not snapped to grid: {0}")]
    Snap(String),
    #[error("non-finite sample at node {node}, time index {step}")]
    NonFinite { node: usize, step: usize },
    #[error("ellipticity violated: gamma = {value} at node {node}, time index {step} (gamma0 = {gamma0})")]
    Ellipticity { node: usize, step: usize, value: f64, gamma0: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("quadrature did not converge: {0}")]
    Quadrature(String),
    #[error("tail formula invalid: {0}")]
    Tail(String),
    #[error("singular step matrix at time index {0}")]
    Singular(usize),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("cache error: {0}")]
    Cache(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
