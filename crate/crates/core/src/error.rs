use thiserror::Error;

use crate::roadnet::{NodeId, SegmentId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate segment id {0}")]
    DuplicateSegment(SegmentId),

    #[error("segment {id}: {reason}")]
    InvalidSegment { id: SegmentId, reason: String },

    #[error("node {node} is placed inconsistently by segments {first} and {second}")]
    DanglingNode {
        node: NodeId,
        first: SegmentId,
        second: SegmentId,
    },

    #[error("edge list is empty")]
    EmptyNetwork,

    #[error("unknown segment {0}")]
    UnknownSegment(SegmentId),

    #[error("token {0} has no road segment")]
    UnknownToken(usize),

    #[error("node {0} has an empty attention neighborhood")]
    EmptyNeighborhood(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("checkpoint was built for a different neighbor mask ({expected} != {found})")]
    MaskMismatch { expected: String, found: String },

    #[error("missing {path}; run `{producer}` first")]
    MissingArtifact { path: String, producer: String },

    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: u64 },

    #[error(transparent)]
    Nn(#[from] nncore::NnError),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
