use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("symbol {symbol} at index {index} is outside the support of its table")]
    SymbolOutOfRange { index: usize, symbol: i32 },

    #[error("entropy-coded stream is truncated")]
    Truncated,

    #[error("malformed bitstream: {0}")]
    Bitstream(String),

    #[error("bitstream model id {stream:016x} does not match parameters {params:016x}")]
    ModelMismatch { stream: u64, params: u64 },

    #[error("checksum mismatch in {0} payload")]
    Checksum(&'static str),

    #[error("frozen parameters changed: {0}")]
    FrozenViolation(String),

    #[error("insufficient overlap between rate-distortion curves: {0}")]
    InsufficientOverlap(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("coder backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {msg}", path.display())]
    Image { path: PathBuf, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
