use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("JPEG quality {0} is outside 1..=100")]
    InvalidQuality(u8),
    #[error("requested {requested} probes but only {available} images are available")]
    InsufficientImages { requested: usize, available: usize },
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("degenerate vector: zero norm")]
    DegenerateVector,
    #[error("vector dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("RBF bandwidth must be positive, got {0}")]
    InvalidBandwidth(f64),
    #[error("need at least {needed} rows, got {got}")]
    InsufficientRows { needed: usize, got: usize },
    #[error("probe set mismatch: {0}")]
    ProbeSetMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("kernel mismatch: {0}")]
    KernelMismatch(String),
    #[error("invalid output matrix: {0}")]
    InvalidOutputs(String),
    #[error("verifier protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("threshold pool is empty")]
    EmptyPool,
    #[error("pool contains a single label class")]
    SingleClass,
    #[error("need at least {needed} samples per group, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },
    #[error("fraction {0} is outside (0, 1)")]
    InvalidFraction(f64),
    #[error("verifier calibration failed: {0}")]
    Calibration(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidImage(_) => "invalid_image",
            Error::InvalidQuality(_) => "invalid_quality",
            Error::InsufficientImages { .. } => "insufficient_images",
            Error::Integrity(_) => "integrity",
            Error::Parse(_) => "parse",
            Error::Io { .. } => "io",
            Error::DegenerateVector => "degenerate_vector",
            Error::DimensionMismatch(..) => "dimension_mismatch",
            Error::InvalidBandwidth(_) => "invalid_bandwidth",
            Error::InsufficientRows { .. } => "insufficient_rows",
            Error::ProbeSetMismatch(_) => "probe_set_mismatch",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::KernelMismatch(_) => "kernel_mismatch",
            Error::InvalidOutputs(_) => "invalid_outputs",
            Error::ProtocolViolation(_) => "protocol_violation",
            Error::EmptyPool => "empty_pool",
            Error::SingleClass => "single_class",
            Error::InsufficientSamples { .. } => "insufficient_samples",
            Error::TrainingDiverged { .. } => "training_diverged",
            Error::InvalidFraction(_) => "invalid_fraction",
            Error::Calibration(_) => "calibration",
            Error::InvalidConfig(_) => "invalid_config",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
