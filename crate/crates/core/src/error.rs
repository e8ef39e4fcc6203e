//! Error taxonomy shared by every module.
//!
//! The split mirrors what callers can do about a failure: `Contract` and
//! `Numeric` are aborts, `Config` and `Data` are user-fixable, `Degenerate`
//! marks inputs a stream-level caller may skip.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition the caller was responsible for does not hold.
    #[error("contract violation: {0}")]
    Contract(String),

    /// NaN/Inf surfaced in checked mode, or a log/variance guard fired.
    #[error("numeric fault in `{op}`: {detail}")]
    Numeric { op: String, detail: String },

    /// Bad configuration: inconsistent dims, unknown preset, hash mismatch.
    #[error("config error: {0}")]
    Config(String),

    /// Missing/corrupt corpus, vocab or checkpoint payloads.
    #[error("data error: {0}")]
    Data(String),

    /// Input too small to process (e.g. sentence shorter than the mask budget).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn numeric(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op: op.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
