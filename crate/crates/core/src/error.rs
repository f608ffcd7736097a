use thiserror::Error;

/// Errors raised by model construction, sampling and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid model state: {0}")]
    State(String),

    #[error("numerical failure in {context}{}", iteration.map(|i| format!(" at iteration {i}")).unwrap_or_default())]
    Numerical {
        context: String,
        iteration: Option<usize>,
    },
}

impl Error {
    pub(crate) fn numerical(context: impl Into<String>) -> Self {
        Error::Numerical {
            context: context.into(),
            iteration: None,
        }
    }

    pub(crate) fn dims(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// Attach the chain iteration to a numerical failure.
    pub fn at_iteration(self, iter: usize) -> Self {
        match self {
            Error::Numerical { context, .. } => Error::Numerical {
                context,
                iteration: Some(iter),
            },
            other => other,
        }
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
