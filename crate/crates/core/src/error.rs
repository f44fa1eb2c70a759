use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("power iteration did not converge (residual {residual:e})")]
    NoConvergence { residual: f64 },

    #[error("node `{0}` from the previous period is missing; streams may only grow")]
    ExpansionViolation(String),

    #[error("duplicate node id `{0}`")]
    DuplicateNode(String),

    #[error("unknown node id `{0}`")]
    UnknownNode(String),

    #[error("node `{0}` has no observation column")]
    MissingNode(String),

    #[error("series too short: {0}")]
    TooShort(String),

    #[error("compute record already consumed")]
    RecordConsumed,

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("gradient supplied for frozen parameter `{0}`")]
    FrozenGradient(String),

    #[error("missing gradient for trainable parameter `{0}`")]
    MissingGradient(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("point is not differentiable: {0}")]
    NotDifferentiable(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("unsupported format version `{0}`")]
    Version(String),

    #[error("incompatible configuration: {0}")]
    Config(String),

    #[error("training aborted at epoch {epoch}, batch {batch} (lr {lr}): non-finite loss")]
    Diverged { epoch: usize, batch: usize, lr: f64 },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument { name, reason: reason.into() }
    }
}
