use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by `{0}`")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("loss node must hold a single real value, got shape {0:?}")]
    LossNotScalar(Vec<usize>),

    #[error("stale tape: parameter `{0}` was modified after the forward pass")]
    StaleTape(String),

    #[error("layer kind `{0}` is not phase-equivariant and cannot be placed in the processing module")]
    Uncertified(String),

    #[error("equivariance audit failed for {what}: residual {residual:e} >= tolerance {tol:e}")]
    CertificationFailed { what: String, residual: f64, tol: f64 },

    #[error("unsupported architecture or variant `{0}`")]
    Unsupported(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("parameter `{0}` missing from checkpoint")]
    MissingParameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
