use std::path::PathBuf;

use stgan_tensor::TensorError;
use thiserror::Error;

/// One problem found while loading a dataset manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadIssue {
    pub file: PathBuf,
    pub line: Option<usize>,
    pub reason: String,
}

impl std::fmt::Display for LoadIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.line {
            Some(line) => write!(f, "{}:{}: {}", self.file.display(), line, self.reason),
            None => write!(f, "{}: {}", self.file.display(), self.reason),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("dataset load failed with {} issue(s); first: {}", .0.len(), .0[0])]
    Load(Vec<LoadIssue>),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: u64, detail: String },
    #[error("evaluation refused: {0}")]
    Evaluation(String),
    #[error("image error: {0}")]
    Image(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the command line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::Load(_) => "load",
            Error::Checkpoint(_) => "checkpoint",
            Error::Diverged { .. } => "diverged",
            Error::Evaluation(_) => "evaluation",
            Error::Image(_) => "image",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
