use thiserror::Error;

#[derive(Debug, Error)]
pub enum InitnoError {
    #[error("no attention entries")]
    EmptyStack,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no target tokens")]
    NoTargetTokens,

    #[error("degenerate self-attention maps")]
    DegenerateSelfAttention,

    #[error("divergent optimization: {0}")]
    Divergent(String),

    #[error("scoring-only backend")]
    ScoringOnlyBackend,

    #[error("unsupported timestep {t} (expected 1..={max})")]
    UnsupportedTimestep { t: usize, max: usize },

    #[error("backend is not differentiable")]
    NotDifferentiable,

    #[error("noise pool is empty")]
    EmptyPool,

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = InitnoError> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> InitnoError {
    InitnoError::ShapeMismatch(msg.into())
}

pub(crate) fn arg_err(msg: impl Into<String>) -> InitnoError {
    InitnoError::InvalidArgument(msg.into())
}
