use thiserror::Error;

/// Errors surfaced by the tensor kernels, the network, and the IO layers.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("geometry error: {0}")]
    Geometry(String),

    /// A value fed to an operation is outside its domain.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration field violates a structural constraint.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A non-finite value appeared where a finite one is required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A binary container failed structural validation.
    #[error("format error: {0}")]
    Format(String),

    /// A binary container validated structurally but carries bad content.
    #[error("content error: {0}")]
    Content(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
