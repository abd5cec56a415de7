use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Index out of range, shape mismatch, or a value outside its domain.
    #[error("domain error: {0}")]
    Domain(String),
    /// Rolling-baseline composition received a missing or duplicated slot.
    #[error("composition error: {0}")]
    Composition(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A caller-side precondition was violated (e.g. more than one slot changed).
    #[error("precondition violated: {0}")]
    Precondition(String),
    /// Environment misuse, such as stepping after the episode finished.
    #[error("contract violated: {0}")]
    Contract(String),
    /// Invalid game, task or schedule definition.
    #[error("invalid definition: {0}")]
    Invalid(String),
    /// Failure reaching a frozen agent.
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
