use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("singular design: columns {columns:?} are linearly dependent on earlier columns")]
    Singular { columns: Vec<String> },

    #[error("no convergence after {iterations} iterations (objective {objective})")]
    NonConvergence {
        iterations: usize,
        objective: f64,
        /// Last (or best) iterate, in the caller's parametrization.
        best: Vec<f64>,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("identification failure: {0}")]
    Identification(String),

    #[error("matrix is not positive semi-definite: {0}")]
    NotPsd(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            found,
        }
    }

    /// True for failures of the numerics or of identification, as opposed to
    /// malformed input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Singular { .. }
                | Error::NonConvergence { .. }
                | Error::NonFinite(_)
                | Error::Identification(_)
        )
    }
}

pub(crate) fn ensure_finite(what: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
