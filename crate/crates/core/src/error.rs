use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse grouping used by the CLI exit codes and the C status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad arguments, malformed files, dimension mismatches.
    Input,
    /// The data is not rich enough (PE violated, rank deficient).
    Data,
    /// A policy failed to stabilize.
    Policy,
    /// A numerical routine failed.
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{path}: {message}")]
    Schema { path: String, message: String },

    #[error("rank deficient: required rank {required}, achieved {achieved}")]
    RankDeficient { required: usize, achieved: usize },

    #[error("matrix is not Schur stable (spectral radius {spectral_radius:.6e})")]
    NotSchurStable { spectral_radius: f64 },

    #[error("no convergence after {iterations} iterations (last change {last_change:.3e})")]
    NoConvergence { iterations: usize, last_change: f64 },

    #[error("state diverged at step {step}{} (norm {norm:.3e})", trajectory.map(|j| format!(" of trajectory {j}")).unwrap_or_default())]
    Diverged {
        step: usize,
        trajectory: Option<usize>,
        norm: f64,
    },

    #[error("pair (A, C) is not observable: rank {rank} < {dim}")]
    NotObservable { rank: usize, dim: usize },

    #[error("data not rich enough in z-coordinates: need {required} independent columns, found {achieved}")]
    DataNotRich { required: usize, achieved: usize },

    #[error("Theta_uu not positive definite (min eigenvalue {min_eigenvalue:.3e})")]
    IllConditionedUpdate { min_eigenvalue: f64 },

    #[error("initial policy is not stabilizing (spectral radius {spectral_radius:.6e})")]
    BadInitialPolicy { spectral_radius: f64 },

    #[error("policy at iteration {iteration} lost stability (spectral radius {spectral_radius:.6e})")]
    InternalStabilityLoss {
        iteration: usize,
        spectral_radius: f64,
    },

    #[error("controller protocol violation: {0}")]
    Protocol(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidInput(_)
            | Error::Schema { .. }
            | Error::Protocol(_)
            | Error::Io(_)
            | Error::Json(_) => ErrorClass::Input,
            Error::RankDeficient { .. } | Error::DataNotRich { .. } | Error::NotObservable { .. } => {
                ErrorClass::Data
            }
            Error::BadInitialPolicy { .. }
            | Error::InternalStabilityLoss { .. }
            | Error::NotSchurStable { .. } => ErrorClass::Policy,
            Error::NoConvergence { .. } | Error::IllConditionedUpdate { .. } | Error::Diverged { .. } => {
                ErrorClass::Numerical
            }
        }
    }
}
