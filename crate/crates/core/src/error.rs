use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("forward cache does not match the model: {0}")]
    InvalidCache(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("enumeration budget exceeded: {bits} mask bits, limit {limit}")]
    Budget { bits: usize, limit: usize },

    #[error("guessed mask makes the masked weights singular (condition {condition:e})")]
    SingularGuess { condition: f64 },

    #[error("layer {layer} has singular masked weights")]
    SingularLayer { layer: usize },

    #[error("coordinate {coordinate} of layer {layer} cannot be recovered")]
    UnrecoverableCoordinate { layer: usize, coordinate: usize },

    #[error("wire format: {0}")]
    Wire(String),

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn in_round(self, round: usize) -> Self {
        match self {
            e @ Error::Round { .. } => e,
            e => Error::Round {
                round,
                source: Box::new(e),
            },
        }
    }
}
