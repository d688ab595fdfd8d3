use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A state produced nonphysical quantities (negative density or pressure).
    #[error("model failure at cell {cell}: {reason}")]
    ModelFailure { cell: usize, reason: String },

    #[error("singular linear system in {0}")]
    Singular(&'static str),

    #[error("requested {requested} basis vectors but the snapshot matrix has rank {achievable}")]
    RankTooLow { requested: usize, achievable: usize },

    #[error("root bracketing failed: {0}")]
    Bracket(String),

    #[error("constraints infeasible with {n_subdomains} subdomain(s) (least-squares residual {ls_residual:.3e})")]
    Infeasible {
        n_subdomains: usize,
        ls_residual: f64,
    },

    #[error("cannot coarsen further: decomposition already has a single subdomain")]
    CannotCoarsen,

    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed data in {file}: {reason}")]
    Parse { file: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            actual,
        }
    }

    /// Solver-side failures (nonphysical states, singular systems, infeasibility)
    /// as opposed to caller mistakes.
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            Error::ModelFailure { .. }
                | Error::Singular(_)
                | Error::Infeasible { .. }
                | Error::CannotCoarsen
                | Error::Bracket(_)
        )
    }
}
