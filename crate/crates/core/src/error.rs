use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not symmetric positive-definite (eigenvalue {eigenvalue:e})")]
    NotSpd { eigenvalue: f64 },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("non-finite criterion at iteration {iteration} (block {block}): {value}")]
    NonFinite {
        iteration: usize,
        block: usize,
        value: f64,
    },

    #[error("all {0} starts aborted; first error: {1}")]
    AllStartsFailed(usize, Box<Error>),

    #[error("stage {stage}: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("tensor format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by numerical breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFinite { .. } | Error::Singular(_) | Error::NotSpd { .. } => true,
            Error::AllStartsFailed(_, inner) => inner.is_numerical(),
            Error::Stage { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
