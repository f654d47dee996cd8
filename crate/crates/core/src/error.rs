use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A logarithm or division was requested outside its domain, typically a
    /// zero probability where the regularized equations take `ln`.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    /// Non-finite intermediate value. `layer` is set when the value came out
    /// of a network layer.
    #[error("non-finite value{}: {what}", layer.map(|l| format!(" in layer {l}")).unwrap_or_default())]
    Numeric { layer: Option<usize>, what: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
