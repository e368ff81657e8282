use thiserror::Error;

#[derive(Debug, Error)]
pub enum RederError {
    #[error("dimension mismatch: {op} got {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("token id {id} out of vocabulary (size {vocab_size})")]
    Vocabulary { id: usize, vocab_size: usize },

    #[error("length infeasible: {frames} frames cannot emit {target} labels")]
    Infeasible { frames: usize, target: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("enumeration too large: {0} alignment strings")]
    EnumerationCap(u128),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("corpus: {0}")]
    Corpus(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, RederError>;
