use thiserror::Error;

pub type Result<T> = std::result::Result<T, RecencyError>;

#[derive(Debug, Error)]
pub enum RecencyError {
    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid subject {index}: {reason}")]
    InvalidSubject { index: usize, reason: String },

    #[error("empty dataset")]
    EmptyData,

    #[error("invalid model specification: {0}")]
    InvalidSpec(String),

    #[error("invalid parameter vector: {0}")]
    InvalidTheta(String),

    #[error(
        "sampling weights sum to {sum} but there are {n} subjects; rescale weights so they sum to n"
    )]
    WeightsNotRescaled { sum: f64, n: usize },

    #[error("non-finite score contribution at subject {index}")]
    NonFiniteScore { index: usize },

    #[error("information matrix is singular; parameter `{parameter}` is nearly unidentified (smallest singular value {singular_value:.3e})")]
    SingularInformation {
        parameter: String,
        singular_value: f64,
    },

    #[error("exponential tilt overflows at s = {s} (exponent {exponent})")]
    TiltOverflow { s: f64, exponent: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("incidence is undefined (0/0) for p_hiv = {p_hiv}, p_art = {p_art}, e_y = {e_y}")]
    IncidenceUndefined { p_hiv: f64, p_art: f64, e_y: f64 },

    #[error("AUC needs both classes present (positives: {positives}, negatives: {negatives})")]
    SingleClass { positives: usize, negatives: usize },

    #[error("invalid scenario configuration: {0}")]
    InvalidScenario(String),

    #[error("{path}: missing mandatory column `{column}`")]
    MissingColumn { path: String, column: String },

    #[error("row {row}, column `{column}`: cannot parse `{value}`")]
    ParseCell {
        row: usize,
        column: String,
        value: String,
    },

    #[error("all rows were dropped during preprocessing")]
    AllRowsDropped,

    #[error("covariate `{0}` has zero variance and cannot be standardized")]
    ZeroVariance(String),

    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
