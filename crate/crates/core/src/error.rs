use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("linear algebra failure: {0}")]
    LinAlg(String),
    #[error("no convergence after {iterations} iterations: {trace}")]
    NonConvergence { iterations: usize, trace: String },
    #[error("sampler failure: {0}")]
    Sampler(String),
    #[error("too many failed fits: {failed} of {total}")]
    Pooling { failed: usize, total: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
