use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported MetaImage header line `{line}`: {reason}")]
    Header { line: String, reason: String },

    #[error("payload size mismatch for `{line}`: expected {expected} bytes, found {found}")]
    PayloadSize {
        line: String,
        expected: usize,
        found: usize,
    },

    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    Shape {
        context: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at step {step}: total={total}, photometric={photometric}, ssim={ssim}, occupancy={occupancy}")]
    NonFiniteLoss {
        step: usize,
        total: f64,
        photometric: f64,
        ssim: f64,
        occupancy: f64,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("field file has {0} channel(s); a displacement field needs 3")]
    ChannelCount(usize),

    #[error("field file lacks the NCF_FIELD_UNIT tag")]
    MissingUnitTag,

    #[error("infeasible synthetic case: {0}")]
    Infeasible(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(context: &'static str, expected: &[usize], found: &[usize]) -> Self {
        Error::Shape {
            context,
            expected: expected.to_vec(),
            found: found.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
