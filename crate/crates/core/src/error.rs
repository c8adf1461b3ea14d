use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("index out of range: {0}")]
    InvalidIndex(String),

    #[error("invalid MDP: {}", .0.join("; "))]
    InvalidMdp(Vec<String>),

    #[error("induced chain is not unichain: {0} closed communicating classes")]
    NotUnichain(usize),

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("critic feature norm {norm} exceeds 1 at state {state}")]
    FeatureNormViolation { state: usize, norm: f64 },

    #[error("{count} deterministic policies exceed the enumeration cap {cap}; supply J* explicitly")]
    EnumerationCapExceeded { count: f64, cap: f64 },

    #[error("non-finite iterate at step {step}: {context}")]
    NonFiniteIterate { step: usize, context: String },

    #[error("transition sampler exhausted after {0} transitions")]
    SamplerExhausted(usize),

    #[error("{0}")]
    Domain(String),

    #[error("environment generation failed: {0}")]
    GenerationFailed(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
