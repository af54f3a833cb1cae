use thiserror::Error;

pub type Result<T, E = OtcError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum OtcError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("unknown code `{0}`")]
    MissingCode(String),
    #[error("ontology error: {0}")]
    Ontology(String),
    #[error("invalid visit: {0}")]
    InvalidVisit(String),
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("sequence of {len} visits exceeds the maximum of {max}")]
    SequenceLength { len: usize, max: usize },
    #[error("anchor is not eligible: {0}")]
    AnchorEligibility(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("index {index} out of range 1..={len}")]
    Bounds { index: usize, len: usize },
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("line {line}: record `{id}`: {reason}")]
    Validation {
        line: usize,
        id: String,
        reason: String,
    },
    #[error("line {line}: parse error: {msg}")]
    Parse { line: usize, msg: String },
    #[error("cannot balance training set: {0}")]
    Balancing(String),
    #[error("training diverged at epoch {epoch}: non-finite {term} loss")]
    Divergence { epoch: usize, term: String },
    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),
    #[error("lookup failed: {0}")]
    Lookup(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
