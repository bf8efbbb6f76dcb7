//! Process exit codes and the mapping from errors onto them.

use std::fmt;

pub const EXIT_OK: u8 = 0;
pub const EXIT_OTHER: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_TRAINING: u8 = 4;

/// A configuration problem detected by the driver itself.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

/// An input-data problem detected by the driver itself.
#[derive(Debug)]
pub struct DataError(pub String);

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "data error: {}", self.0)
    }
}

impl std::error::Error for DataError {}

fn library_code(e: &ratesynth::Error) -> u8 {
    use ratesynth::Error as E;
    match e {
        E::Config(_) | E::Toml(_) | E::Domain(_) | E::Range(_) => EXIT_CONFIG,
        E::TrainingFault { .. } => EXIT_TRAINING,
        E::Json(_) | E::Evaluation(_) => EXIT_DATA,
        e if e.is_data_error() => EXIT_DATA,
        _ => EXIT_OTHER,
    }
}

/// Exit code for the first classified error in the chain.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return EXIT_CONFIG;
        }
        if cause.is::<DataError>() {
            return EXIT_DATA;
        }
        if let Some(e) = cause.downcast_ref::<ratesynth::Error>() {
            return library_code(e);
        }
        if cause.is::<std::io::Error>() {
            return EXIT_DATA;
        }
    }
    EXIT_OTHER
}
