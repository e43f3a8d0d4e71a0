use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A scalar argument lies outside the range where the operation is defined.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    /// The coupled mean system is singular (frames fully aligned in some direction).
    #[error("singular system: {0}")]
    Singular(String),

    #[error("rank-deficient design: effective rank {rank} < {dim} at relative tolerance {tol:e}")]
    RankDeficient { rank: usize, dim: usize, tol: f64 },

    #[error("degenerate direction: {0}")]
    Degenerate(String),

    #[error("head training diverged at iteration {iteration} (loss = {loss})")]
    Divergence { iteration: usize, loss: f64 },

    #[error("config error (line {line}): {message}")]
    Config {
        line: usize,
        key: Option<String>,
        message: String,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("malformed container: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
