use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A vector whose norm is zero was passed where a direction is required.
    #[error("zero-norm vector passed as {operand}")]
    ZeroNorm { operand: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    /// Generic precondition violation.
    #[error("{0}")]
    Domain(String),

    #[error("degenerate cohort: {side} standard deviation {sigma:e} is below 1e-12")]
    DegenerateCohort { side: &'static str, sigma: f64 },

    #[error("non-finite {what} at batch {batch}")]
    NonFinite { batch: usize, what: String },

    #[error("stale forward cache: cache generation {cache}, parameter generation {params}")]
    StaleCache { cache: u64, params: u64 },

    #[error("config {path}:{line}: {message}")]
    Config {
        path: String,
        line: usize,
        message: String,
    },

    #[error("malformed {what}: {message}")]
    Format { what: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn zero_norm(operand: impl Into<String>) -> Self {
        Error::ZeroNorm {
            operand: operand.into(),
        }
    }

    pub fn format(what: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps the error with a description of what was being attempted.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub(crate) fn check_dim(context: &str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context: context.to_string(),
            expected,
            got,
        })
    }
}
