use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eig:e})")]
    NotPsd { min_eig: f64 },

    #[error("dimension mismatch: {0}")]
    DimError(String),

    #[error("state diverged at step {step}")]
    Diverged { step: usize },

    #[error("configuration error: {0}")]
    ConfigError(String),

    #[error("model is not in the consistency set")]
    NotInSet,

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("no optimal solution available (status {0})")]
    NoSolution(String),

    #[error("initial SDP is infeasible for c = {c:e}; try a larger c and reduce it gradually")]
    InitialInfeasible { c: f64 },

    #[error("SDP solve failed at step {step}: {detail}")]
    SolverFailed { step: usize, detail: String },

    #[error("Riccati iteration did not converge in {iters} iterations")]
    NotStabilizable { iters: usize },

    #[error("I/O error: {0}")]
    Io(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
