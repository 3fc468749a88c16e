use fin_core::FinError;
use thiserror::Error;

/// Input problems detected by the front end itself.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{0} check(s) failed")]
    CheckFailed(usize),
}

pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_DATA: i32 = 4;
pub const EXIT_SAMPLER: i32 = 5;
pub const EXIT_IO: i32 = 6;
pub const EXIT_CHECK: i32 = 7;
pub const EXIT_OTHER: i32 = 1;

/// Exit status for an error, from the first categorized cause in its chain.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Config(_) => EXIT_CONFIG,
                CliError::Data(_) => EXIT_DATA,
                CliError::CheckFailed(_) => EXIT_CHECK,
            };
        }
        if let Some(e) = cause.downcast_ref::<FinError>() {
            return match e {
                FinError::Config(_) => EXIT_CONFIG,
                FinError::InvalidArgument(_) => EXIT_DATA,
                FinError::NotPositiveDefinite { .. } | FinError::NonFinite { .. } | FinError::Invariant(_) => {
                    EXIT_SAMPLER
                }
            };
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return EXIT_CONFIG;
        }
        if cause.downcast_ref::<csv::Error>().is_some() {
            return EXIT_DATA;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_OTHER
}
