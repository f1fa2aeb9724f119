use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-positive depth {0} (point behind camera)")]
    NonPositiveDepth(f64),

    #[error("no valid pixels: {0}")]
    NoValidPixels(String),

    #[error("non-finite gradient: {0}")]
    NonFiniteGradient(String),

    #[error("non-finite loss at sampling step {step} (timestep {timestep}): {detail}")]
    NonFiniteLoss {
        step: usize,
        timestep: usize,
        detail: String,
    },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("training diverged at step {step}: loss {loss}")]
    DivergedTraining { step: usize, loss: f64 },

    #[error("malformed header ({format}): {detail}")]
    MalformedHeader { format: &'static str, detail: String },

    #[error("truncated data: expected {expected} bytes, found {found}")]
    TruncatedData { expected: usize, found: usize },

    #[error("missing field `{0}`")]
    MissingField(String),

    #[error("non-rigid extrinsic: {0}")]
    NonRigidExtrinsic(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Stable category name, printed by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::NonPositiveDepth(_) => "NonPositiveDepth",
            Error::NoValidPixels(_) => "NoValidPixels",
            Error::NonFiniteGradient(_) => "NonFiniteGradient",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::DegenerateFit(_) => "DegenerateFit",
            Error::DivergedTraining { .. } => "DivergedTraining",
            Error::MalformedHeader { .. } => "MalformedHeader",
            Error::TruncatedData { .. } => "TruncatedData",
            Error::MissingField(_) => "MissingField",
            Error::NonRigidExtrinsic(_) => "NonRigidExtrinsic",
            Error::InvalidValue(_) => "InvalidValue",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Io { .. } => "Io",
            Error::Image(_) => "ImageCodec",
        }
    }

    /// Process exit status for this error category. Zero is reserved for success.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::DimensionMismatch(_) => 10,
            Error::NonPositiveDepth(_) => 11,
            Error::NoValidPixels(_) => 12,
            Error::NonFiniteGradient(_) => 13,
            Error::NonFiniteLoss { .. } => 14,
            Error::DegenerateFit(_) => 15,
            Error::DivergedTraining { .. } => 16,
            Error::MalformedHeader { .. } => 20,
            Error::TruncatedData { .. } => 21,
            Error::MissingField(_) => 22,
            Error::NonRigidExtrinsic(_) => 23,
            Error::InvalidValue(_) => 30,
            Error::InvalidConfig(_) => 31,
            Error::Io { .. } => 40,
            Error::Image(_) => 41,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
