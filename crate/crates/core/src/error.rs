use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value in {context}: {detail}")]
    NonFinite { context: String, detail: String },

    #[error("quadratic program did not reach KKT tolerance after {iterations} iterations (residual {residual:.3e})")]
    QpBudget {
        iterations: usize,
        residual: f64,
        best: Vec<f64>,
    },

    #[error("solver invariant violated at iteration {iteration}: {detail}")]
    Invariant { iteration: usize, detail: String },

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn non_finite(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
            detail: detail.into(),
        }
    }
}
