use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic in {0}")]
    BadMagic(PathBuf),
    #[error("unsupported format version {version} in {path}")]
    UnsupportedVersion { path: PathBuf, version: u32 },
    #[error("truncated file {0}")]
    Truncated(PathBuf),
    #[error("checksum mismatch in {0}")]
    Checksum(PathBuf),
    #[error("negative value encountered in {0}")]
    NegativeValue(PathBuf),
    #[error("non-finite value in activation map")]
    NonFinite,
    #[error("invalid shape: {0}")]
    Shape(String),
    #[error("{path}:{line}: unparseable line: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("missing tensor file {0}")]
    MissingTensor(PathBuf),
    #[error("unknown image id {0:?}")]
    UnknownImage(String),
    #[error("no salient mass in saliency map")]
    NoSalientMass,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("bad dimension: {0}")]
    BadDimension(String),
    #[error("zero descriptor")]
    ZeroDescriptor,
    #[error("empty patch")]
    EmptyPatch,
    #[error("graph too small: {0} vertices")]
    GraphTooSmall(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("conjugate gradients did not converge after {iterations} iterations (relative residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("empty database")]
    EmptyDatabase,
    #[error("query {0:?} has no positives")]
    NoPositives(String),
    #[error("degenerate box: {0}")]
    DegenerateBox(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("missing stage {stage}: run `{stage}` first ({detail})")]
    MissingStage { stage: String, detail: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
