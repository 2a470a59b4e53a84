use thiserror::Error;

/// Errors surfaced by the library. The CLI maps `Numeric` to a distinct
/// exit code from the input/configuration failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bounds error: {0}")]
    Bounds(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl Error {
    /// True for failures of the numerical kind (non-finite losses,
    /// factorization breakdown) as opposed to bad inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
