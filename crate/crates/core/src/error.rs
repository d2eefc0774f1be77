use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure classes, used by the command-line driver to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Infeasible,
    Overflow,
    Contract,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("integration produced a non-finite state at substep {substep}")]
    IntegrationOverflow { substep: usize },

    /// A relaxed multiplier was passed where a binary (SOS1) one is required.
    #[error("multiplier {weights:?} is not binary and has no control-value preimage")]
    NotBinary { weights: Vec<f64> },

    #[error("invalid multiplier: {0}")]
    InvalidMultiplier(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("Riccati iteration did not converge after {iterations} iterations (residual {residual:e})")]
    Stabilizability { iterations: usize, residual: f64 },

    /// The optimizer could not drive the terminal violation below tolerance.
    #[error("optimal control problem infeasible: terminal violation {violation:e} after {iterations} iterations")]
    SolverInfeasible { violation: f64, iterations: usize },

    #[error("closed-loop step {step} failed: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::Step {
            step,
            source: Box::new(self),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Step { source, .. } => source.kind(),
            Error::Config { .. } | Error::UnknownModel(_) => ErrorKind::Config,
            Error::SolverInfeasible { .. } | Error::NotBinary { .. } => ErrorKind::Infeasible,
            Error::IntegrationOverflow { .. } => ErrorKind::Overflow,
            Error::Io(_) | Error::Csv(_) => ErrorKind::Io,
            Error::DimensionMismatch { .. }
            | Error::InvalidMultiplier(_)
            | Error::Precondition(_)
            | Error::Stabilizability { .. } => ErrorKind::Contract,
        }
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            found,
        })
    }
}
