use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("cannot grow beyond {max_tasks} tasks")]
    Capacity { max_tasks: usize },
    #[error("task {task} is not available (seen tasks: {seen})")]
    TaskIndex { task: usize, seen: usize },
    #[error("memory budget {budget} is not divisible by {classes} classes")]
    Budget { budget: usize, classes: usize },
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated input: expected {expected} bytes, found {actual}")]
    Length { expected: usize, actual: usize },
    #[error("invalid config at `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("task {task}: {source}")]
    InTask {
        task: usize,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn in_task(self, task: usize) -> Self {
        match self {
            e @ Error::InTask { .. } => e,
            e => Error::InTask {
                task,
                source: Box::new(e),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
