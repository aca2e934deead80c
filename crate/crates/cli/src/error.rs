use stegduel_core::stego::StegoError;
use stegduel_core::tensor::TensorError;
use stegduel_core::Error;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Tensor(TensorError::Overflow { .. }) => CliError::Numeric(e.to_string()),
            Error::Contract(_) | Error::Stego(StegoError::Contract(_)) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        Error::from(e).into()
    }
}

impl From<StegoError> for CliError {
    fn from(e: StegoError) -> Self {
        Error::from(e).into()
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<stegduel_core::nets::CheckpointError> for CliError {
    fn from(e: stegduel_core::nets::CheckpointError) -> Self {
        CliError::Data(format!("cannot load checkpoint: {e}"))
    }
}

impl From<stegduel_core::data::PgmError> for CliError {
    fn from(e: stegduel_core::data::PgmError) -> Self {
        CliError::Data(e.to_string())
    }
}

pub fn data_at(path: &std::path::Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}
