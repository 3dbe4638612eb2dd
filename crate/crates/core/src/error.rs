use thiserror::Error;

pub type Result<T, E = DtsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DtsError {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("insufficient examples in {pool} pool: need {needed}, have {available}")]
    Capacity {
        pool: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("state error: {0}")]
    State(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl DtsError {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        DtsError::Validation(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        DtsError::Shape(msg.into())
    }

    /// Exit status for command-line front ends: validation-class failures map
    /// to 2, everything else to 3.
    pub fn exit_code(&self) -> i32 {
        match self {
            DtsError::Validation(_) | DtsError::Shape(_) | DtsError::Capacity { .. } => 2,
            _ => 3,
        }
    }
}
