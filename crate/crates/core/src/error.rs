use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A configuration violates a numerical constraint (for example the
    /// colored-noise resolution rule).
    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown keys in experiment spec: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),

    #[error("spec parse error: {0}")]
    Parse(String),

    #[error("trajectory {index}: {reason}")]
    Trajectory { index: usize, reason: String },

    #[error("too many escaped trajectories: {escaped} of {total} (limit {limit_fraction})")]
    Escapes {
        escaped: usize,
        total: usize,
        limit_fraction: f64,
    },

    #[error("step-size error: norm drift {drift:e} per unit time exceeds {limit:e}")]
    NormDrift { drift: f64, limit: f64 },

    #[error("degenerate measurement: conditional mass {mass:e} under the window")]
    DegenerateMeasurement { mass: f64 },

    #[error("{module}: {source}")]
    Module {
        module: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("trace mismatch: {0}")]
    Trace(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Wraps the error with the name of the module it came from.
    pub fn in_module(self, module: &'static str) -> Self {
        match self {
            e @ Error::Module { .. } => e,
            e => Error::Module {
                module,
                source: Box::new(e),
            },
        }
    }

    /// True for errors caused by a bad request rather than a failed run.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::InvalidArgument(_)
            | Error::Config(_)
            | Error::UnknownKeys(_)
            | Error::Parse(_) => true,
            Error::Module { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
