use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid polynomial order {0}: must be at least 1")]
    InvalidOrder(usize),

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("non-admissible state: density {density:e}, pressure {pressure:e}")]
    NonAdmissible { density: f64, pressure: f64 },

    #[error("log mean requires positive arguments, got ({0:e}, {1:e})")]
    NonPositiveMean(f64, f64),

    /// Failure inside the time loop, carrying where it happened.
    #[error("numerical failure in element {element} at t = {time:e}: {reason}")]
    Numerical {
        element: usize,
        time: f64,
        reason: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("layout mismatch: {0}")]
    Layout(String),

    #[error("clustering failed: {0}")]
    Clustering(String),

    #[error("malformed snapshot: {0}")]
    Snapshot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidOrder(_) | Error::InvalidMesh(_) => 2,
            Error::Numerical { .. } | Error::NonAdmissible { .. } | Error::NonPositiveMean(..) => 3,
            Error::Clustering(_) => 3,
            Error::Layout(_) | Error::Snapshot(_) | Error::Io(_) => 1,
        }
    }

    pub(crate) fn at_element(self, element: usize, time: f64) -> Error {
        match self {
            Error::Numerical { .. } => self,
            other => Error::Numerical {
                element,
                time,
                reason: other.to_string(),
            },
        }
    }
}
