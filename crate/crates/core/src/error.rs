use thiserror::Error;

/// Errors produced by the toolkit.
///
/// Variants are grouped so that a command-line driver can map them onto
/// distinct exit codes (configuration, data, training).
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),

    #[error("data error at row {row}: {message}")]
    Row { row: usize, message: String },

    #[error("encoding error: variable `{variable}` has unknown level `{value}`")]
    UnknownLevel { variable: String, value: String },

    #[error("decode error: {0}")]
    Decode(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training fault at iteration {iteration}: {message}")]
    TrainingFault { iteration: usize, message: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("toml error: {0}")]
    Toml(String),
}

impl Error {
    /// True for errors caused by bad inputs rather than bad configuration or
    /// numerical faults.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::MissingColumn(_)
                | Error::Row { .. }
                | Error::UnknownLevel { .. }
                | Error::Decode(_)
                | Error::Io(_)
                | Error::Csv(_)
        )
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Toml(e.to_string())
    }
}

impl From<toml::ser::Error> for Error {
    fn from(e: toml::ser::Error) -> Self {
        Error::Toml(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
