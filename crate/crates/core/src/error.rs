use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node `{node}`: {detail}")]
    Shape { node: String, detail: String },

    #[error("graph input `{0}` is not bound")]
    MissingInput(String),

    #[error("backward called before forward")]
    BackwardBeforeForward,

    #[error("loss node must be scalar, got dims {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("gradient check requires 64-bit floats")]
    GradCheckPrecision,

    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),

    #[error("non-finite values: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("training diverged at iteration {iteration} (loss = {loss})")]
    Diverged { iteration: usize, loss: f64 },

    #[error("all {runs} training runs diverged")]
    AllRunsDiverged { runs: usize },

    #[error("only class {0} is present, at least two classes are required")]
    SingleClass(usize),

    #[error("{groups} distinct groups cannot fill {folds} folds")]
    InsufficientGroups { groups: usize, folds: usize },

    #[error("{count} validation or test samples of task {task} appeared in training batches")]
    Leakage { task: String, count: usize },

    #[error("trunk is in train mode; switch to eval mode before extracting features")]
    TrainModeExtraction,

    #[error("score table is incomplete, missing cells: {}", .0.join(", "))]
    MissingCells(Vec<String>),

    #[error("unknown protocol `{0}`")]
    UnknownProtocol(String),

    #[error("results store at {path} was produced by config {found}, current config is {expected}")]
    ConfigHashMismatch {
        path: PathBuf,
        found: String,
        expected: String,
    },

    #[error("{what}: bad magic {found:?}")]
    BadMagic { what: &'static str, found: [u8; 4] },

    #[error("{what}: unsupported format version {found} (this build reads version {supported})")]
    VersionMismatch {
        what: &'static str,
        found: u32,
        supported: u32,
    },

    #[error("{what}: corrupt or truncated file ({detail})")]
    Corrupt { what: &'static str, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(node: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            node: node.into(),
            detail: detail.into(),
        }
    }
}
