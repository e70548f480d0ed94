use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure class, used by the command line front-end to pick an exit
/// code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Training,
    Evaluation,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("backbone `{0}` is not implemented (the encoder interfaces accept it, but no weights loader exists yet)")]
    NotImplemented(String),

    #[error("unsupported backbone `{0}`; known backbones: toy, clip-resnet50")]
    UnsupportedBackbone(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged {
        epoch: usize,
        /// Best checkpoint recorded before the divergence, if any epoch finished.
        last_good: Option<Box<crate::stage1::Stage1Checkpoint>>,
    },

    #[error("evaluation failed: {0}")]
    Evaluation(String),
}

impl Error {
    pub fn data(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::NotImplemented(_) | Error::UnsupportedBackbone(_) => {
                ErrorKind::Config
            }
            Error::Data { .. } | Error::Io { .. } | Error::Format { .. } | Error::Invalid(_) => {
                ErrorKind::Data
            }
            Error::Training(_) | Error::Diverged { .. } => ErrorKind::Training,
            Error::Evaluation(_) => ErrorKind::Evaluation,
        }
    }
}

/// Attaches a path to `std::io` results.
pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|e| Error::io(path, e))
    }
}
