//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or parameter shapes do not line up.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },

    /// An argument is outside its documented range.
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// A value that must be finite is NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// An attention mask row allows no positions (softmax undefined).
    #[error("attention mask row {row} is all zeros")]
    EmptyMaskRow { row: usize },

    /// `backward` was asked to differentiate a non-scalar node.
    #[error("loss node must be a scalar, got dims {dims:?}")]
    NonScalarLoss { dims: Vec<usize> },

    /// The computation graph is not topologically ordered.
    #[error("computation graph cycle: node {node} consumes a later node")]
    GraphCycle { node: usize },

    /// Binary tensor file is malformed; offset is where parsing stopped.
    #[error("tensor file error at byte {offset}: {msg}")]
    TensorFormat { offset: u64, msg: String },

    /// Manifest, label file, or split spec failed validation.
    #[error("manifest error: {0}")]
    Manifest(String),

    /// Checkpoint container is inconsistent or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Stored file format version is not supported.
    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    /// Loaded configuration conflicts with the requested one.
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    /// A metric precondition failed (e.g. zero positives, constant input).
    #[error("metric error: {0}")]
    Metric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(
        context: impl Into<String>,
        expected: impl Into<String>,
        got: impl Into<String>,
    ) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
