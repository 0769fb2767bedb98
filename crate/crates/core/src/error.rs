use thiserror::Error;

/// Errors surfaced by the simulation and aggregation library.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Tensor/vector dimensions do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    /// A value violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("client has no data")]
    EmptyClientData,
    #[error("empty test set")]
    EmptyTestSet,
    #[error("nothing to normalize")]
    EmptyAtlas,
    #[error("zero-norm update rejected")]
    ZeroNormAnchor,
    #[error("fallback undefined: no new anchors since the previous search")]
    FallbackUndefined,
    #[error("out-of-domain search requires fallback coefficients")]
    FallbackMissing,
    /// A computation produced a non-finite value.
    #[error("numerical overflow: {0}")]
    NonFinite(String),
    #[error("configuration invalid: {0}")]
    InvalidConfig(String),
    #[error("metrics record malformed: {0}")]
    MalformedMetrics(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
