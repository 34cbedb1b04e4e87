use thiserror::Error;

/// Errors raised by construction, factorization and solve routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A Cholesky-type factorization met a non-positive pivot.
    #[error("matrix is not positive definite ({context}): pivot {pivot} = {value:e}")]
    NotPositiveDefinite {
        context: String,
        pivot: usize,
        value: f64,
    },

    /// `I + B` lost positive definiteness while building node `node` on level `level`.
    #[error("indefinite I + B at node {node} (level {level}): min eigenvalue {min_eig:e}")]
    Indefinite {
        node: usize,
        level: usize,
        min_eig: f64,
    },

    /// `rᵀ·M⁻¹·r` came out non-positive inside PCG.
    #[error("preconditioner is not positive definite: rᵀM⁻¹r = {value:e} at iteration {iteration}")]
    IndefinitePreconditioner { iteration: usize, value: f64 },

    #[error("densification of a {dim}x{dim} matrix refused (cap {cap})")]
    DensifyCap { dim: usize, cap: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("H2 compression failed at node {node}: relative error {achieved:e} at rank cap {rank_cap}")]
    Compression {
        node: usize,
        achieved: f64,
        rank_cap: usize,
    },

    /// Malformed serialized data (CSV point files, binary caches).
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
