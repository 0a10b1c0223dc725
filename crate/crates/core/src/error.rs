use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    /// A line of an input file could not be understood.
    #[error("{what}, line {line}: {msg}")]
    Format {
        what: &'static str,
        line: usize,
        msg: String,
    },

    /// A numeric argument was outside the domain of the function it was passed to.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("labelings share no query ids")]
    DisjointLabelings,

    #[error("unknown node id {0}")]
    UnknownNode(u32),
}

impl Error {
    pub(crate) fn format(what: &'static str, line: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            what,
            line,
            msg: msg.into(),
        }
    }
}
