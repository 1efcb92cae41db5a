use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("no voxels to normalize")]
    EmptyRegion,
    #[error("empty scan")]
    EmptyScan,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid label value {value} at voxel ({z}, {y}, {x})")]
    InvalidLabel { value: u8, z: usize, y: usize, x: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("not a NIfTI-1 file")]
    NotNifti,
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("weight store: {0}")]
    WeightStore(String),
    #[error("checksum mismatch for tensor '{0}'")]
    Checksum(String),
    #[error("missing tensor '{0}'")]
    MissingTensor(String),
    #[error("tensor '{name}' has shape {actual:?}, expected {expected:?}")]
    TensorShape { name: String, expected: Vec<usize>, actual: Vec<usize> },
    #[error("degenerate intensity")]
    DegenerateIntensity,
    #[error("non-finite gradient in tensor '{0}'")]
    NonFiniteGradient(String),
    #[error("non-finite loss at epoch {epoch}, iteration {iteration}: {snapshot}")]
    NonFiniteLoss { epoch: usize, iteration: usize, snapshot: String },
    #[error("backward pass requires a tape recorded in train mode")]
    EvalTape,
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest: {0}")]
    Manifest(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short machine-parseable class used by the command-line front end.
    pub fn class(&self) -> &'static str {
        match self {
            Error::EmptyRegion | Error::EmptyScan | Error::DegenerateIntensity => "data",
            Error::Shape(_) | Error::TensorShape { .. } => "shape",
            Error::InvalidLabel { .. } => "label",
            Error::Config(_) => "config",
            Error::NotNifti | Error::UnsupportedDatatype(_) | Error::Truncated { .. } => "format",
            Error::WeightStore(_) | Error::Checksum(_) | Error::MissingTensor(_) => "weights",
            Error::NonFiniteGradient(_) | Error::NonFiniteLoss { .. } => "numeric",
            Error::EvalTape => "usage",
            Error::MissingInput(_) => "input",
            Error::Io { .. } => "io",
            Error::Manifest(_) => "manifest",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
