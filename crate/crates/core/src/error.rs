use std::path::PathBuf;

use crate::scene::SegmentId;

/// Errors raised by the planning pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),

    #[error("invalid scene: {field}: {message}")]
    InvalidScene { field: String, message: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("projection undefined: {0}")]
    DegenerateProjection(String),

    #[error("cftp-not-collapsed: chains still apart at horizon {horizon}")]
    CftpNotCollapsed { horizon: u64 },

    #[error("no stable grasp: {0}")]
    NoStableGrasp(String),

    #[error("visible volume must be positive, got {0}")]
    NoVisibleVolume(f64),

    #[error("belief collapse: history contradicts every sampled composition")]
    BeliefCollapse,

    #[error("stale action: segment {0} is not in the current scene")]
    StaleAction(SegmentId),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn scene(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidScene {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
