//! Bus keys and JSON payload shapes shared by every component.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geometry::Pose2;
use crate::node::LifecycleState;
use crate::world::SpotId;

pub const POSES: &str = "avp/sim/poses";
pub const COLLISION: &str = "avp/sim/collision";
pub const OCCUPANCY: &str = "avp/rsu/occupancy";
pub const COORD_VEHICLES: &str = "avp/coord/vehicles";
pub const COORD_STATUS: &str = "avp/coord/status";
pub const COORD_QUEUE: &str = "avp/coord/queue";
pub const COORD_RESERVED: &str = "avp/coord/reserved";
pub const COORD_EVICTED: &str = "avp/coord/evicted";
pub const READY_PREFIX: &str = "avp/_ready";

/// Client id the managers connect with; RTT probes target it.
pub const MANAGERS_ID: &str = "managers";
pub const WORLD_ID: &str = "world";
pub const RSU_ID: &str = "rsu";

/// Second segments that are not vehicle namespaces.
pub const RESERVED_NAMESPACES: &[&str] = &[
    "coord", "sim", "rsu", "probe", "_ready", "world", "managers", "gateway", "harness", "operator",
];

pub mod leaf {
    pub const REGISTER: &str = "register";
    pub const REGISTER_REPLY: &str = "register_reply";
    pub const HEARTBEAT: &str = "heartbeat";
    pub const STATUS: &str = "status";
    pub const QUEUE_REQ: &str = "queue_req";
    pub const QUEUE_REPLY: &str = "queue_reply";
    pub const RESERVE_REQUEST: &str = "reserve_request";
    pub const RESERVE_REPLY: &str = "reserve_reply";
    pub const RELEASE: &str = "release";
    pub const RELEASE_REPLY: &str = "release_reply";
    pub const BAY_GRANT: &str = "bay_grant";
    pub const CMD: &str = "cmd";
    pub const PATH: &str = "path";
    pub const GOAL_STATUS: &str = "goal_status";
    pub const SPAWN: &str = "spawn";
    pub const DESPAWN: &str = "despawn";
    pub const RTT: &str = "rtt";
}

pub fn ns_key(ns: &str, leaf: &str) -> String {
    format!("avp/{ns}/{leaf}")
}

pub fn ready_key(name: &str) -> String {
    format!("{READY_PREFIX}/{name}")
}

/// `avp/<ns>/<leaf>` → (`ns`, `leaf`) when `ns` is a vehicle namespace.
pub fn split_ns_key(key: &str) -> Option<(&str, &str)> {
    let mut parts = key.splitn(3, '/');
    if parts.next()? != "avp" {
        return None;
    }
    let ns = parts.next()?;
    let leaf = parts.next()?;
    if RESERVED_NAMESPACES.contains(&ns) || leaf.contains('/') {
        return None;
    }
    Some((ns, leaf))
}

pub fn validate_ns(ns: &str) -> Result<(), String> {
    if ns.is_empty() {
        return Err("namespace is empty".into());
    }
    if RESERVED_NAMESPACES.contains(&ns) {
        return Err(format!("namespace {ns:?} is reserved"));
    }
    if !ns.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
        return Err(format!("namespace {ns:?} may only contain [A-Za-z0-9_-]"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub ns: String,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub len: f64,
    pub wid: f64,
    #[serde(default = "default_class")]
    pub class: String,
}

fn default_class() -> String {
    crate::world::DEFAULT_CLASS.to_string()
}

impl PoseRecord {
    pub fn pose(&self) -> Pose2 {
        Pose2::new(self.x, self.y, self.yaw)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathMsg {
    pub goal_id: u64,
    pub poses: Vec<Pose2>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalOutcome {
    Reached,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalStatusMsg {
    pub goal_id: u64,
    pub status: GoalOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpawnMsg {
    pub pose: Pose2,
    pub len: f64,
    pub wid: f64,
    pub max_speed: f64,
    pub class: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionMsg {
    pub a: String,
    pub b: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccupancyMsg {
    pub frame_seq: u64,
    /// Sequence number of the `avp/sim/poses` envelope the frame was computed from.
    pub pose_seq: u64,
    pub occupied: Vec<SpotId>,
    pub available: Vec<SpotId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reply {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<usize>,
}

impl Reply {
    pub fn ok() -> Self {
        Self {
            ok: true,
            reason: None,
            active_count: None,
            position: None,
        }
    }

    pub fn rejected(reason: &str) -> Self {
        Self {
            ok: false,
            reason: Some(reason.to_string()),
            active_count: None,
            position: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum ReserveReply {
    Grant { spot_id: SpotId, frame_seq: u64 },
    Deny { reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "what", rename_all = "snake_case")]
pub enum ReleaseMsg {
    Bay,
    Spot { spot_id: SpotId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CommandKind {
    Dropoff,
    Park,
    Retrieve,
}

impl CommandKind {
    /// The only state in which the command has an effect.
    pub fn legal_in(self) -> LifecycleState {
        match self {
            CommandKind::Dropoff => LifecycleState::Arriving,
            CommandKind::Park => LifecycleState::AwaitingPark,
            CommandKind::Retrieve => LifecycleState::Parked,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandMsg {
    pub kind: CommandKind,
    pub target_ns: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusMsg {
    pub ns: String,
    pub state: LifecycleState,
    pub seq: u64,
    #[serde(default)]
    pub failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spot_id: Option<SpotId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<Pose2>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VehiclesMsg {
    pub count: usize,
    pub roster: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusRow {
    pub state: LifecycleState,
    pub seq: u64,
    pub updated_at_ns: i64,
}

pub type StatusTableMsg = BTreeMap<String, StatusRow>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueMsg {
    pub order: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ReservedEntry {
    pub spot_id: SpotId,
    pub ns: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvictedMsg {
    pub ns: String,
    pub reason: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub released_spot: Option<SpotId>,
    pub was_queued: bool,
}
