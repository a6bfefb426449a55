//! Error type shared across the crate.
//!
//! Errors are split along the boundaries callers care about: shape/validation
//! problems (bad input, bad config, bad data files) versus numerical failures
//! (non-finite values, diverging training). The CLI maps the former to exit
//! code 1 and the latter to exit code 2.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands whose shapes cannot be combined by the named operation.
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An axis argument out of range for the operand's rank.
    #[error("invalid axis {axis} for rank-{rank} tensor in {op}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    /// A primitive produced NaN or +/-Inf; these are error states, never values.
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    /// A malformed argument that is not a shape problem (bad probability, empty
    /// input, invalid slice range, ...). The message names the offender.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A dataset record that fails validation. The message names the
    /// conversation id, utterance index and the offending field.
    #[error("data error: {0}")]
    Data(String),

    /// A run-configuration problem (unknown key, unparsable value, missing
    /// required entry, inconsistent dimensions).
    #[error("config error: {0}")]
    Config(String),

    /// Training diverged or some other runtime numerical failure occurred.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures that should abort with the "numerical" exit status.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Numerical(_))
    }
}
