use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config values or option combinations.
    #[error("{0}")]
    Usage(String),

    /// Inputs that cannot be read, parsed or paired.
    #[error("{0}")]
    Data(String),

    #[error(transparent)]
    Core(#[from] videns_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Core(e) if e.is_numeric() => EXIT_NUMERIC,
            CliError::Core(videns_core::Error::InvalidArgument(_)) => EXIT_USAGE,
            CliError::Core(_) => EXIT_DATA,
        }
    }
}

pub(crate) fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub(crate) fn data(msg: impl Into<String>) -> CliError {
    CliError::Data(msg.into())
}
