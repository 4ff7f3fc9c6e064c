use thiserror::Error;

/// Errors raised anywhere in the calibration pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("rank-deficient design: columns {0:?} are linearly dependent on earlier columns")]
    RankDeficient(Vec<usize>),

    #[error("covariance matrix is not positive definite (after jitter retry)")]
    NotPositiveDefinite,

    #[error("no hours retained: every hour has fewer than {min_airbox} sensor or {min_epa} reference values")]
    NoHoursRetained { min_airbox: usize, min_epa: usize },

    #[error("insufficient spatial sampling: every distance bin has fewer than {min_pairs} pairs")]
    InsufficientBins { min_pairs: usize },

    #[error("fewer than two sensors survived screening ({survivors} left)")]
    TooFewSensors { survivors: usize },

    #[error("hour {hour}: {source}")]
    Hour { hour: i64, source: Box<Error> },

    #[error("{failed} of {total} hours failed to fit; first failure: {first}")]
    TooManyFailures { failed: usize, total: usize, first: String },

    #[error("calibration slope is zero at site {0}; cannot invert")]
    ZeroSlope(String),

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error("maximum-likelihood fit failed: {0}")]
    Likelihood(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at_hour(self, hour: i64) -> Self {
        Error::Hour {
            hour,
            source: Box::new(self),
        }
    }

    /// Short stable identifier used by the command-line front end.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::RankDeficient(_) => "rank_deficient",
            Error::NotPositiveDefinite => "not_positive_definite",
            Error::NoHoursRetained { .. } => "no_hours_retained",
            Error::InsufficientBins { .. } => "insufficient_bins",
            Error::TooFewSensors { .. } => "too_few_sensors",
            Error::Hour { source, .. } => source.kind(),
            Error::TooManyFailures { .. } => "too_many_failures",
            Error::ZeroSlope(_) => "zero_slope",
            Error::MissingPrerequisite(_) => "missing_prerequisite",
            Error::Likelihood(_) => "likelihood",
            Error::Parse(_) => "parse",
            Error::Csv(_) => "csv",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
