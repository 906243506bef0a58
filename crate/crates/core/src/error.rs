use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("class id {0} is outside the class catalog")]
    UnknownClass(u8),

    #[error("this loss is only defined for incremental steps (t >= 2); got step {0}")]
    FirstStep(usize),

    #[error("missing teacher snapshot at step {0}")]
    MissingTeacher(usize),

    #[error("detector has no prototypes")]
    NoPrototypes,

    #[error("training diverged: loss is {value} at step {step}")]
    NonFiniteLoss { step: usize, value: f64 },

    #[error("replay buffer is empty")]
    EmptyBuffer,

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("missing data: {0}")]
    MissingData(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Safetensors(#[from] safetensors::SafeTensorError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
