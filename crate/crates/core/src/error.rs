use thiserror::Error;

pub type Result<T> = std::result::Result<T, NestError>;

#[derive(Debug, Error)]
pub enum NestError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("node {0} is isolated (zero degree in the affinity graph)")]
    IsolatedNode(usize),

    #[error("region {0} has no assigned nodes")]
    EmptyRegion(usize),

    #[error("symmetric eigensolver did not converge (residual norm {0:e})")]
    EigenNonConvergence(f64),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("truncated file: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },

    #[error("checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    ChecksumMismatch { stored: u64, computed: u64 },

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl NestError {
    /// Short stable identifier, used as the machine-parsable prefix by the CLI.
    pub fn kind(&self) -> &'static str {
        match self {
            NestError::Shape { .. } => "shape",
            NestError::InvalidArgument(_) => "invalid-argument",
            NestError::IsolatedNode(_) => "isolated-node",
            NestError::EmptyRegion(_) => "empty-region",
            NestError::EigenNonConvergence(_) => "eigen",
            NestError::NonFinite(_) => "non-finite",
            NestError::BadMagic { .. } => "bad-magic",
            NestError::Truncated { .. } => "truncated",
            NestError::ChecksumMismatch { .. } => "checksum",
            NestError::Malformed(_) => "malformed",
            NestError::Config(_) => "config",
            NestError::Io(_) => "io",
            NestError::Json(_) => "json",
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> NestError {
    NestError::InvalidArgument(msg.into())
}
