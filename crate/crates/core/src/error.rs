use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("degenerate vector: norm {norm:e} is below 1e-12")]
    DegenerateVector { norm: f64 },

    #[error("label {label} at index {index} is outside [0, {classes})")]
    Label {
        index: usize,
        label: usize,
        classes: usize,
    },

    #[error("index {index} out of range (bound {bound})")]
    Index { index: usize, bound: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("divergence in {phase} at step {step}: loss is not finite")]
    Divergence { phase: &'static str, step: usize },

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
