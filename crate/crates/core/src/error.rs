use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("row {row}: {message}")]
    BadRow { row: usize, message: String },

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("prior {prior} cannot be assigned to `{parameter}`: {reason}")]
    PriorDomain {
        parameter: String,
        prior: String,
        reason: String,
    },

    #[error("invalid prior: {0}")]
    InvalidPrior(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("sampler initialization failed for {model}: no finite log density after {attempts} attempts")]
    Init { model: String, attempts: usize },

    #[error("invalid sampler configuration: {0}")]
    Config(String),

    #[error("results are not comparable: {0}")]
    Incomparable(String),

    #[error("{0}")]
    Undefined(String),

    #[error("series too short: {0}")]
    SeriesTooShort(String),

    #[error("missing future regressors: {0}")]
    MissingRegressors(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
