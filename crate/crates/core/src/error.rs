use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("operation requires a {expected} head")]
    WrongHead { expected: &'static str },
    #[error("invalid training setup: {0}")]
    InvalidTraining(String),
    #[error("training loss became non-finite at epoch {epoch} (last finite loss {last_loss})")]
    NonFiniteLoss { epoch: usize, last_loss: f64 },
    #[error("invalid perturbation ball: {0}")]
    InvalidBall(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("center margin is zero; the class to defend is ambiguous")]
    AmbiguousCenter,
    #[error("network file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
