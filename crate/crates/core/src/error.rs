use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("n = {n} is not divisible by |S_{r}| = {size}")]
    Divisibility { n: usize, r: usize, size: usize },
    #[error("information matrix is singular (reciprocal condition number {rcond:.3e})")]
    Singular { rcond: f64 },
    #[error("correlation matrix is not positive semi-definite (smallest eigenvalue {min_eigenvalue:.3e})")]
    NotPositiveSemiDefinite { min_eigenvalue: f64 },
    #[error("no convergence: {0}")]
    NoConvergence(String),
}

impl Error {
    /// True for failures of a numerical procedure rather than of its inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Singular { .. } | Error::NotPositiveSemiDefinite { .. } | Error::NoConvergence(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
