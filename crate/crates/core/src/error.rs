use thiserror::Error;

/// Errors raised by estimation, bound computation and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("moment function returned a non-finite value at theta = {theta:?}, observation {index}")]
    Evaluation { theta: Vec<f64>, index: usize },

    #[error("covariance of the moment function is singular or ill-conditioned (min eigenvalue {min_eigenvalue:e}, condition number {condition:e})")]
    SingularCovariance { min_eigenvalue: f64, condition: f64 },

    #[error("optimizer did not converge from any start; best theta {best_theta:?} with objective {best_objective:e}")]
    NonConvergence {
        best_theta: Vec<f64>,
        best_objective: f64,
        gradient_norm: f64,
    },

    #[error("criterion is infinite on every start point of the parameter box")]
    Infeasible,

    #[error("dual problem is unbounded (zero is outside the convex hull of the moment values): {reason}")]
    UnboundedDual { reason: String },

    #[error("value {value:e} outside the domain of {what}")]
    Domain { what: String, value: f64 },

    #[error("matrix {name} is {problem}")]
    Matrix { name: &'static str, problem: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid problem definition: {0}")]
    InvalidProblem(String),

    #[error("invalid divergence {id}: {reason}")]
    InvalidDivergence { id: String, reason: String },

    #[error("unknown {kind} id {id:?} (field `{field}`)")]
    UnknownId {
        kind: &'static str,
        id: String,
        field: String,
    },

    #[error("invalid configuration field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{failed} of {total} replications failed for estimator {estimator} (limit {limit_pct}%)")]
    TooManyFailures {
        estimator: String,
        failed: usize,
        total: usize,
        limit_pct: u32,
    },

    #[error("need at least 2 successful replications, got {0}")]
    TooFewReplications(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
