use thiserror::Error;

pub type Result<T> = std::result::Result<T, HmtError>;

#[derive(Debug, Error)]
pub enum HmtError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("softmax row {row} has no allowed entries")]
    DegenerateRow { row: usize },
    #[error("max-pool over an empty row selection")]
    EmptyPool,
    #[error("expected a scalar loss, got shape {0:?}")]
    Rank(Vec<usize>),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated input at byte offset {offset}")]
    Truncated { offset: u64 },
    #[error("document {doc_id}: {}", violations.join("; "))]
    Validation {
        doc_id: String,
        violations: Vec<String>,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("empty split")]
    EmptySplit,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("non-finite loss at epoch {epoch}, document {doc_id}")]
    NonFiniteLoss { epoch: usize, doc_id: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HmtError {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        HmtError::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// Short stable identifier for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            HmtError::Dimension { .. } => "dimension",
            HmtError::DegenerateRow { .. } => "degenerate-row",
            HmtError::EmptyPool => "empty-pool",
            HmtError::Rank(_) => "rank",
            HmtError::NonFinite(_) => "non-finite",
            HmtError::Format(_) => "format",
            HmtError::Truncated { .. } => "truncated",
            HmtError::Validation { .. } => "validation",
            HmtError::Config(_) => "config",
            HmtError::EmptySplit => "empty-split",
            HmtError::LabelOutOfRange { .. } => "label-out-of-range",
            HmtError::UnknownParam(_) => "unknown-param",
            HmtError::NonFiniteLoss { .. } => "non-finite-loss",
            HmtError::Io(_) => "io",
        }
    }

    /// True for errors caused by numeric breakdown rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            HmtError::NonFinite(_) | HmtError::NonFiniteLoss { .. } | HmtError::DegenerateRow { .. }
        )
    }
}
