use thiserror::Error;

pub type Result<T> = std::result::Result<T, KestError>;

#[derive(Debug, Error)]
pub enum KestError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("split error: need {required} examples, {available} available")]
    Split { required: usize, available: usize },
    #[error("training aborted: {0}")]
    Training(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("metric undefined: {0}")]
    Metric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(String),
}

impl KestError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn integrity(msg: impl Into<String>) -> Self {
        Self::Integrity(msg.into())
    }

    pub fn precondition(msg: impl Into<String>) -> Self {
        Self::Precondition(msg.into())
    }
}

impl From<serde_json::Error> for KestError {
    fn from(e: serde_json::Error) -> Self {
        Self::Serde(e.to_string())
    }
}

impl From<csv::Error> for KestError {
    fn from(e: csv::Error) -> Self {
        Self::Serde(e.to_string())
    }
}
