use thiserror::Error;

use crate::block_id::BlockId;
use crate::sim::Rank;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// The packed id layout cannot hold the requested domain or path.
    #[error("id capacity exceeded: {0}")]
    Capacity(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// Two adjacent blocks differ by more than one level.
    #[error("2:1 balance violated between {a} and {b}")]
    Balance { a: BlockId, b: BlockId },

    #[error("message addressed to out-of-range rank {dest} (rank count {size})")]
    Fabric { dest: Rank, size: usize },

    #[error("locality violation: rank {from} addressed non-neighbor rank {to}")]
    Locality { from: Rank, to: Rank },

    #[error("protocol leak: {0} undelivered or unconsumed message(s) at termination")]
    ProtocolLeak(usize),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("audit error: {0}")]
    Audit(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// Strips any stage tag.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}
