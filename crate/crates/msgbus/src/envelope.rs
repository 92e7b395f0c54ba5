use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Reserved prefix for router control frames.
pub const CONTROL_PREFIX: &str = "_ctl/";

pub mod ctl {
    pub const HELLO: &str = "_ctl/hello";
    pub const WELCOME: &str = "_ctl/welcome";
    pub const SUBSCRIBE: &str = "_ctl/subscribe";
    pub const REMAP: &str = "_ctl/remap";
    pub const ACK: &str = "_ctl/ack";
    pub const ERROR: &str = "_ctl/error";
}

/// One bus message. Field order matches the wire object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub key: String,
    pub sender_id: String,
    pub seq: u64,
    pub timestamp_ns: i64,
    pub payload: Value,
}

impl Envelope {
    pub fn is_control(&self) -> bool {
        is_control_key(&self.key)
    }
}

pub fn is_control_key(key: &str) -> bool {
    key.starts_with(CONTROL_PREFIX)
}

/// Wall-clock nanoseconds since the Unix epoch.
pub fn now_ns() -> i64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos() as i64)
        .unwrap_or(0)
}
