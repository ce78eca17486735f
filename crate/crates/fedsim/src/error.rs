use std::io;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot read {}: {source}", path.display())]
    Read { path: PathBuf, source: io::Error },
    #[error("cannot write {}: {source}", path.display())]
    Write { path: PathBuf, source: io::Error },
    /// Malformed or inconsistent configuration, including override and
    /// comparison mismatches.
    #[error("{0}")]
    Config(String),
    /// Bad input data file.
    #[error("{}: {message}", path.display())]
    Data { path: PathBuf, message: String },
    #[error(transparent)]
    Sim(#[from] fedsim_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit status: 2 for bad input, 3 for numeric aborts, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Read { .. } | Error::Config(_) | Error::Data { .. } => 2,
            Error::Sim(e) if e.is_numeric() => 3,
            Error::Sim(fedsim_core::Error::Observer(_)) => 1,
            Error::Sim(_) => 2,
            Error::Write { .. } => 1,
        }
    }
}
