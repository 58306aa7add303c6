use thiserror::Error;

/// Errors raised by the estimation, scan and I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid segment [{lo}, {hi}] for a series of length {len}")]
    InvalidSegment { lo: usize, hi: usize, len: usize },

    #[error("parameter {theta:?} lies outside the parameter space")]
    ThetaOutOfBounds { theta: Vec<f64> },

    #[error("parameter has dimension {got}, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite conditional mean at t = {t}")]
    NonFinite { t: usize },

    #[error("non-positive conditional mean {value} at t = {t}")]
    NonPositiveMean { t: usize, value: f64 },

    #[error("segment of length {len} is shorter than the minimum fit length {min}")]
    SegmentTooShort { len: usize, min: usize },

    #[error("all starting points failed on segment [{lo}, {hi}]: {detail}")]
    FitFailed { lo: usize, hi: usize, detail: String },

    #[error("information matrix is numerically zero")]
    SingularInformation,

    #[error("the admissible set of break pairs is empty (n = {n}, v_n = {v_n})")]
    EmptyScanSet { n: usize, v_n: usize },

    #[error("{failed} of {total} middle-segment fits did not converge")]
    TooManyNonConverged { failed: usize, total: usize },

    #[error("no critical value for d = {d}, alpha = {alpha}")]
    MissingQuantile { d: usize, alpha: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("empty input")]
    EmptyInput,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidSegment { .. } => "invalid_segment",
            Error::ThetaOutOfBounds { .. } => "theta_out_of_bounds",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::NonPositiveMean { .. } => "non_positive_mean",
            Error::SegmentTooShort { .. } => "segment_too_short",
            Error::FitFailed { .. } => "fit_failed",
            Error::SingularInformation => "singular_information",
            Error::EmptyScanSet { .. } => "empty_scan_set",
            Error::TooManyNonConverged { .. } => "too_many_non_converged",
            Error::MissingQuantile { .. } => "missing_quantile",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Parse { .. } => "parse",
            Error::EmptyInput => "empty_input",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    /// Process exit code for the CLI: 2 for bad input, 3 for numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. }
            | Error::NonPositiveMean { .. }
            | Error::FitFailed { .. }
            | Error::SingularInformation
            | Error::TooManyNonConverged { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
