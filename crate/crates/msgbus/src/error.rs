use thiserror::Error;

use crate::keyexpr::KeyExprError;

#[derive(Debug, Error)]
pub enum BusError {
    #[error(transparent)]
    KeyExpr(#[from] KeyExprError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed frame: {0}")]
    Json(#[from] serde_json::Error),
    #[error("frame of {size} bytes exceeds the {max} byte limit")]
    FrameTooLarge { size: usize, max: usize },
    #[error("router rejected request: {code}: {reason}")]
    Rejected { code: String, reason: String },
    #[error("session closed")]
    Closed,
    #[error("timed out waiting for {0}")]
    Timeout(String),
    #[error("probe of `{peer}` failed: no pong received for {sent} pings")]
    ProbeFailed { peer: String, sent: u32 },
    #[error("protocol violation: {0}")]
    Protocol(String),
}
