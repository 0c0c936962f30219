use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shape, range, ordering).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("covariance matrix is not positive definite (pivot {pivot} = {value:e})")]
    DegenerateCovariance { pivot: usize, value: f64 },

    #[error("every hypothesis assigns zero likelihood to the data at step {step}")]
    DegenerateClass { step: usize },

    #[error("task {task} has no records at step {step}")]
    EmptyDataset { task: usize, step: usize },

    #[error(
        "linear-span assumption violated at step {step}, next state {state}: residual {residual:e}"
    )]
    SpanViolated {
        step: usize,
        state: usize,
        residual: f64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
