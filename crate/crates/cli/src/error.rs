use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config key {key}: {message}")]
    Config { key: String, message: String },
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: mixrec_core::Error,
    },
    #[error("missing {artifact}; run stage {stage} first")]
    Missing { artifact: String, stage: String },
    #[error("output directory {0} is locked by another run")]
    Locked(PathBuf),
    #[error("unknown stage {0:?}")]
    UnknownStage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;
