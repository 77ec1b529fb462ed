use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid user-facing configuration (bad widths, schedule, spec values).
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A caller broke an operation's precondition (bad labels, stale cache, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("iteration {t} is past the end of the schedule (t1 = {t1})")]
    OutOfSchedule { t: u64, t1: u64 },

    #[error("training collapsed at iteration {iteration}")]
    Collapse { iteration: u64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn sampling(msg: impl Into<String>) -> Self {
        Error::Sampling(msg.into())
    }
}
