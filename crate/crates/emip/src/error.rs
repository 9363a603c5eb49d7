use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum EmipError {
    #[error("tensor: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error("shape: {0}")]
    Shape(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("data at {path}: {reason}")]
    Data { path: PathBuf, reason: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("integrity: group `{group}` hash {found} does not match recorded {expected}")]
    Integrity {
        group: String,
        expected: String,
        found: String,
    },
    #[error("memory pool: {0}")]
    Pool(#[from] emip_core::PoolError),
    #[error("generator: {0}")]
    Generator(#[from] emip_core::ConfigError),
    #[error("metrics: {0}")]
    Metric(#[from] emip_core::MetricError),
    #[error("flow file: {0}")]
    FlowFile(#[from] emip_core::FlowFileError),
}

pub type Result<T> = std::result::Result<T, EmipError>;

impl EmipError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn data(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Self::Data {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
