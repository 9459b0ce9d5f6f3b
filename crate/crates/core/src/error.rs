use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("field has zero or negative total mass ({mass})")]
    ZeroMass { mass: f64 },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("sampling region {region:?} is not contained in the domain [0,{b}]x[0,{c}]")]
    RegionOutsideDomain { region: [f64; 4], b: f64, c: f64 },

    #[error("non-finite velocity for agent {agent} at {position:?}")]
    NonFiniteVelocity { agent: usize, position: [f64; 2] },

    #[error("Gram matrix could not be factorized even with jitter {jitter:e}")]
    SingularGram { jitter: f64 },

    #[error("time step {dt:e} exceeds the stability bound {bound:e}")]
    CflViolation { dt: f64, bound: f64 },

    #[error("feedback velocity provider returned a non-finite value at t = {t}")]
    NonFiniteFeedback { t: f64 },

    #[error("density is not strictly positive (min value {min:e} at cell {cell})")]
    NonPositiveDensity { min: f64, cell: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("failed to parse {what}: {reason}")]
    Parse { what: String, reason: String },

    #[error("invalid value for `{key}`: {reason}")]
    Validation { key: String, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn validation(key: &str, reason: impl Into<String>) -> Self {
        Error::Validation {
            key: key.to_string(),
            reason: reason.into(),
        }
    }

    pub(crate) fn parse(what: impl Into<String>, reason: impl ToString) -> Self {
        Error::Parse {
            what: what.into(),
            reason: reason.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
