use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("noise level {0} outside [0, 1]")]
    NoiseLevelOutOfRange(f64),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("singular conversion {from} -> {to} at alpha={alpha}, sigma={sigma}")]
    SingularConversion {
        from: &'static str,
        to: &'static str,
        alpha: f64,
        sigma: f64,
    },

    #[error("action {action} outside vocabulary of size {vocab}")]
    ActionOutOfVocabulary { action: usize, vocab: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("covariance is not positive semidefinite: {0}")]
    NotPsd(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("invalid task: {0}")]
    InvalidTask(String),

    #[error("invalid guidance scheme: {0}")]
    InvalidScheme(String),

    #[error("invalid path: {0}")]
    InvalidPath(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged at step {step}: loss={loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("steering provider failed: {0}")]
    Steering(String),

    #[error("tensor file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
