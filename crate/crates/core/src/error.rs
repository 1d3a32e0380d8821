use thiserror::Error;

#[derive(Debug, Error)]
pub enum QueenError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value in layer {layer}")]
    NonFinite { layer: usize },

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("class {class} has no samples")]
    EmptyClass { class: usize },

    #[error("class {class} is degenerate (zero mean radius)")]
    DegenerateClass { class: usize },

    #[error("unknown class {class} (have {n_classes})")]
    UnknownClass { class: usize, n_classes: usize },

    #[error("no anchor in the batch has a positive partner")]
    NoPositivePairs,

    #[error("query {index}: {source}")]
    AtQuery {
        index: usize,
        #[source]
        source: Box<QueenError>,
    },

    #[error("schema version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(#[from] toml::de::Error),
}

impl QueenError {
    pub(crate) fn at_query(index: usize, err: QueenError) -> Self {
        QueenError::AtQuery {
            index,
            source: Box::new(err),
        }
    }
}

pub type Result<T> = std::result::Result<T, QueenError>;
