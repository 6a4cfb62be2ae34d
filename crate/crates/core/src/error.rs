//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, ConftError>;

#[derive(Debug, Error)]
pub enum ConftError {
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("degenerate representation: norm {norm:e} below 1e-12")]
    DegenerateRepresentation { norm: f64 },

    #[error("stale forward cache: model was modified after the forward pass")]
    StaleCache,

    #[error("non-finite gradient in {block}; aborting optimizer step")]
    NonFiniteGradient { block: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed task: {0}")]
    MalformedTask(String),

    #[error("malformed pair plan: {0}")]
    MalformedPlan(String),

    #[error("negative weighting undefined: no task negatives and no distractors")]
    UndefinedWeighting,

    #[error("label {label} is outside the classifier head's class set")]
    LabelDomain { label: usize },

    #[error("finetuning diverged (non-finite loss or parameters) at epoch {epoch}")]
    FinetuneDiverged { epoch: usize },

    #[error("episode sampling failed for class {class}: {reason}")]
    Episode { class: usize, reason: String },

    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("degenerate prior: support separation at epoch 0 is zero")]
    DegeneratePrior,

    #[error("evaluation failed: {0}")]
    Evaluation(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("empty domain: {0}")]
    EmptyDomain(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<ConftError>,
    },
}

impl ConftError {
    /// Wrap an error with run-time context (arm, task id, ...).
    pub fn with_context(self, context: impl Into<String>) -> Self {
        ConftError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub(crate) fn io_err(path: &std::path::Path, source: std::io::Error) -> ConftError {
    ConftError::Io {
        path: path.display().to_string(),
        source,
    }
}
