use std::path::PathBuf;

/// Errors produced anywhere in the estimation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("fft length {0} is not a power of two")]
    NotPowerOfTwo(usize),

    #[error("signal too short: need at least {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("matrix is not positive definite (pivot {index} = {value:e})")]
    NotPositiveDefinite { index: usize, value: f64 },

    #[error("eigenvalue iteration did not converge after {0} sweeps")]
    NoConvergence(usize),

    #[error("position outside room: {0}")]
    OutsideRoom(String),

    #[error("reverberation time {t60} s is too small for the room geometry")]
    InvalidT60 { t60: f64 },

    #[error("no frames labelled {0}")]
    EmptyFrameClass(&'static str),

    #[error("zero reference signal")]
    ZeroReference,

    #[error("unknown position id {0}")]
    UnknownPosition(usize),

    #[error("backward already run on this tape")]
    DoubleBackward,

    #[error("non-finite loss at {0}")]
    NonFiniteLoss(String),

    #[error("container format: {0}")]
    Format(String),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input or missing files rather than
    /// internal failures.
    pub fn is_user_error(&self) -> bool {
        !matches!(
            self,
            Error::NoConvergence(_) | Error::DoubleBackward | Error::NonFiniteLoss(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
