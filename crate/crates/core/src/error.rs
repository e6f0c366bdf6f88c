use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("codec adapter `{adapter}` failed: {message}")]
    Adapter { adapter: String, message: String },

    #[error("codec adapter `{0}` is unavailable (binary not found)")]
    AdapterUnavailable(String),

    #[error("training diverged at iteration {iteration}: {message}")]
    Diverged { iteration: u64, message: String },

    #[error("{0}")]
    Evaluation(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Stable machine-readable category, used by the CLI for exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) | Error::Shape(_) => "input",
            Error::NonFinite(_) | Error::Diverged { .. } => "numeric",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Adapter { .. } | Error::AdapterUnavailable(_) => "adapter",
            Error::Evaluation(_) => "evaluation",
            Error::Image(_) | Error::Io { .. } => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
