use thiserror::Error;

/// Errors produced by the training, accounting and data layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("delta {delta} is not above the infinite-loss mass {infinity_mass}")]
    Unsatisfiable { delta: f64, infinity_mass: f64 },

    #[error("noise calibration failed: {0}")]
    Calibration(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("unknown user `{0}`")]
    UnknownUser(String),

    #[error("record of length {0} is too short for next-token prediction")]
    RecordTooShort(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
