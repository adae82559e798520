use thiserror::Error;

/// Errors raised by estimation, inference and data loading.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unit {index} is marked as observed but has no outcome value")]
    MissingObservedOutcome { index: usize },

    #[error("sample has no respondents")]
    EmptyRespondents,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("design matrix is rank deficient (rank {rank}, need {required})")]
    RankDeficient { rank: usize, required: usize },

    #[error("calibration targets lie outside the attainable set{}", pattern_suffix(*.pattern))]
    Infeasible { pattern: Option<usize> },

    #[error("singular Jacobian in Newton step")]
    SingularJacobian,

    #[error("no convergence after {0} iterations")]
    MaxIterations(usize),

    #[error("estimating equation has no root: {0}")]
    NoRoot(String),

    #[error("response indicator is separated by the covariates; the logistic MLE does not exist")]
    Separation,

    #[error("dual path left the positive-weight region")]
    NonPositiveWeight,

    #[error("derivative matrix of the estimating function is singular")]
    SingularTau,

    #[error("{failed} of {total} replicates failed")]
    TooManyFailures { failed: usize, total: usize },

    #[error("optimizer did not converge: {0}")]
    NoConvergence(String),

    #[error("no unit has every outcome observed")]
    NoCompleteCases,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("column `{0}` not found in input header")]
    BadColumn(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("non-numeric value `{value}` in column `{column}` at line {line}")]
    NonNumeric {
        column: String,
        line: usize,
        value: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn pattern_suffix(pattern: Option<usize>) -> String {
    match pattern {
        Some(p) => format!(" (missingness pattern {p})"),
        None => String::new(),
    }
}

impl Error {
    /// True for failures of a numerical procedure, as opposed to bad input or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::RankDeficient { .. }
                | Error::Infeasible { .. }
                | Error::SingularJacobian
                | Error::MaxIterations(_)
                | Error::NoRoot(_)
                | Error::Separation
                | Error::NonPositiveWeight
                | Error::SingularTau
                | Error::TooManyFailures { .. }
                | Error::NoConvergence(_)
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io(_) | Error::Parse { .. } | Error::NonNumeric { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
