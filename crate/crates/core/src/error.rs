use crate::tensor::TensorError;
use crate::tokenizer::TokenizerError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("token id {id} at position {position} exceeds vocabulary size {vocab_size}")]
    TokenOutOfRange {
        id: usize,
        position: usize,
        vocab_size: usize,
    },
    #[error("{0}")]
    Transfer(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("training: {0}")]
    Training(String),
    #[error("metrics: {0}")]
    Metrics(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
