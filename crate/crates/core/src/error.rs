use thiserror::Error;

/// Errors produced anywhere in the modal identification pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("truss generation failed: {0}")]
    Generation(String),

    #[error("system assembly failed: {0}")]
    Assembly(String),

    #[error("eigen solve failed: {0}")]
    Eigen(String),

    #[error("damping outside (0, 1) for mode {mode}: zeta = {zeta}")]
    Damping { mode: usize, zeta: f64 },

    #[error("signal processing error: {0}")]
    Signal(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("dataset format error: {0}")]
    Format(String),

    #[error("dataset validation error: {0}")]
    Validation(String),

    #[error("non-finite {term} ({context})")]
    NonFinite { term: String, context: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
