use alloc::boxed::Box;
use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unsupported operation: {0}")]
    Unsupported(&'static str),
    /// Raised by a client's local pass. The engine reports rounds counting
    /// from 1, like [`crate::RoundRecord::round`]; [`crate::client::local_update`]
    /// alone reports the 0-based round it was given.
    #[error("local update failed at round {round}, client {client}, step {step}: {source}")]
    Client {
        round: usize,
        client: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("round {round} failed: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("momentum identity violated at round {round}: residual {residual:e} exceeds {bound:e}")]
    MomentumIdentity { round: usize, residual: f64, bound: f64 },
    #[error("round observer failed: {0}")]
    Observer(String),
}

impl Error {
    /// True for failures caused by the numerics of a run rather than by its inputs.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite(_) | Error::MomentumIdentity { .. } => true,
            Error::Client { source, .. } | Error::Round { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}
