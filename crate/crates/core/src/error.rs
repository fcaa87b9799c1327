use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("groups {groups} must divide c_in {c_in} and c_out {c_out}")]
    Groups { groups: usize, c_in: usize, c_out: usize },

    #[error("empty output window: input {h}x{w}, kernel {k}, stride {stride}, padding {padding}")]
    EmptyOutput {
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        padding: usize,
    },

    #[error("channel range [{start}, {end}) out of bounds for {channels} channels")]
    ChannelRange { start: usize, end: usize, channels: usize },

    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infeasible configuration: {0}")]
    Infeasible(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
