use std::path::PathBuf;

/// Errors raised by the tensor kernel, the prompt pipeline and the data layer.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("softmax row {row} has no finite entry after bias")]
    AllMasked { row: usize },

    #[error("loss is not a tracked scalar")]
    UntrackedLoss,

    #[error("support mask has no foreground pixel")]
    EmptySupportMask,

    #[error("metric report is empty")]
    EmptyReport,

    #[error("unknown class id {0}")]
    UnknownClass(u32),

    #[error("{count} classes cannot be split evenly into {folds} folds")]
    NonDivisibleClassCount { count: usize, folds: usize },

    #[error("fold index {index} out of range for {folds} folds")]
    FoldIndex { index: usize, folds: usize },

    #[error("tubes differ in frame count ({left} vs {right})")]
    FrameCountMismatch { left: usize, right: usize },

    #[error("training diverged at step {step}")]
    DivergenceDetected { step: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint missing or incomplete: {0}")]
    CheckpointMissing(PathBuf),

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    /// True for failures caused by arithmetic rather than bad input or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::AllMasked { .. } | Error::DivergenceDetected { .. }
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io(_) | Error::CheckpointMissing(_) | Error::Format { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
