//! Per-vehicle lifecycle controller.

pub mod fsm;

use std::sync::Arc;

use avp_msgbus::Envelope;
use serde_json::{json, Value};
use tracing::{debug, error, info, warn};

pub use fsm::{transition, Action, LifecycleState, NodeEvent, NodeState, ReserveOutcome};

use crate::geometry::Pose2;
use crate::runtime::{Component, Outbox};
use crate::topics::{
    self, leaf, ns_key, CommandMsg, EvictedMsg, GoalOutcome, GoalStatusMsg, PathMsg, PoseRecord, ReleaseMsg, Reply,
    ReserveReply, SpawnMsg, StatusMsg,
};
use crate::world::{plan_route, LotMap, DEFAULT_CLASS, DEFAULT_LENGTH_M, DEFAULT_MAX_SPEED_MPS, DEFAULT_WIDTH_M};

pub const NODE_TICK_NS: i64 = 100_000_000;
pub const HEARTBEAT_NS: i64 = 1_000_000_000;
/// Register and spawn requests are repeated this often until acknowledged.
pub const HANDSHAKE_RETRY_NS: i64 = 1_000_000_000;

#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub ns: String,
    pub spawn_pose: Pose2,
    pub class: String,
    pub length: f64,
    pub width: f64,
    pub max_speed: f64,
}

impl NodeConfig {
    pub fn new(ns: impl Into<String>, spawn_pose: Pose2) -> Self {
        Self {
            ns: ns.into(),
            spawn_pose,
            class: DEFAULT_CLASS.to_string(),
            length: DEFAULT_LENGTH_M,
            width: DEFAULT_WIDTH_M,
            max_speed: DEFAULT_MAX_SPEED_MPS,
        }
    }
}

pub struct VehicleNode {
    config: NodeConfig,
    map: Arc<LotMap>,
    state: NodeState,
    pose: Option<Pose2>,
    registered: bool,
    spawned: bool,
    last_register_ns: i64,
    last_spawn_ns: i64,
    last_heartbeat_ns: i64,
    goal_id: u64,
    active_goal: Option<u64>,
    finished: bool,
    failed: bool,
}

impl VehicleNode {
    pub fn new(config: NodeConfig, map: Arc<LotMap>) -> Self {
        Self {
            config,
            map,
            state: NodeState::new(0),
            pose: None,
            registered: false,
            spawned: false,
            last_register_ns: i64::MIN,
            last_spawn_ns: i64::MIN,
            last_heartbeat_ns: i64::MIN,
            goal_id: 0,
            active_goal: None,
            finished: false,
            failed: false,
        }
    }

    pub fn state(&self) -> &NodeState {
        &self.state
    }

    /// Set when the node stopped because of an unrecoverable condition
    /// (rejected registration, eviction).
    pub fn failed(&self) -> bool {
        self.failed
    }

    fn key(&self, leaf: &str) -> String {
        ns_key(&self.config.ns, leaf)
    }

    fn send_spawn(&mut self, now_ns: i64, out: &mut Outbox) {
        self.last_spawn_ns = now_ns;
        out.publish(
            self.key(leaf::SPAWN),
            SpawnMsg {
                pose: self.config.spawn_pose,
                len: self.config.length,
                wid: self.config.width,
                max_speed: self.config.max_speed,
                class: self.config.class.clone(),
            },
        );
    }

    fn send_register(&mut self, now_ns: i64, out: &mut Outbox) {
        self.last_register_ns = now_ns;
        out.publish(self.key(leaf::REGISTER), json!({"ns": self.config.ns}));
    }

    fn send_status(&self, failed: bool, out: &mut Outbox) {
        out.publish(
            self.key(leaf::STATUS),
            StatusMsg {
                ns: self.config.ns.clone(),
                state: self.state.phase,
                seq: self.state.seq,
                failed,
                spot_id: self.state.held_spot,
                pose: self.pose,
            },
        );
    }

    fn handle(&mut self, event: NodeEvent, now_ns: i64, out: &mut Outbox) {
        let (next, actions) = transition(&self.state, &event, now_ns);
        if next.phase != self.state.phase {
            debug!(ns = self.config.ns, from = %self.state.phase, to = %next.phase, "transition");
        }
        self.state = next;
        let mut follow_up = None;
        for action in actions {
            match action {
                Action::SendRegister => self.send_register(now_ns, out),
                Action::SendStatus { failed } => self.send_status(failed, out),
                Action::Enqueue => out.publish(self.key(leaf::QUEUE_REQ), json!({})),
                Action::RequestReservation => out.publish(self.key(leaf::RESERVE_REQUEST), json!({})),
                Action::ReleaseBay => out.publish(self.key(leaf::RELEASE), ReleaseMsg::Bay),
                Action::ReleaseReservation(spot_id) => {
                    out.publish(self.key(leaf::RELEASE), ReleaseMsg::Spot { spot_id })
                }
                Action::Despawn => {
                    out.publish(self.key(leaf::DESPAWN), json!({}));
                    self.finished = true;
                }
                Action::SendPath(goal) => {
                    let from = self.pose.unwrap_or(self.config.spawn_pose);
                    match plan_route(&self.map, from, goal) {
                        Ok(route) => {
                            self.goal_id += 1;
                            self.active_goal = Some(self.goal_id);
                            out.publish(
                                self.key(leaf::PATH),
                                PathMsg {
                                    goal_id: self.goal_id,
                                    poses: route.poses,
                                },
                            );
                        }
                        Err(e) => {
                            warn!(ns = self.config.ns, error = %e, "route planning failed");
                            follow_up = Some(NodeEvent::GoalFailed);
                        }
                    }
                }
            }
        }
        if let Some(ev) = follow_up {
            self.handle(ev, now_ns, out);
        }
    }

    fn on_pose_snapshot(&mut self, payload: &Value) {
        let Ok(poses) = serde_json::from_value::<Vec<PoseRecord>>(payload.clone()) else {
            return;
        };
        if let Some(me) = poses.iter().find(|p| p.ns == self.config.ns) {
            self.pose = Some(me.pose());
            self.spawned = true;
        }
    }
}

impl Component for VehicleNode {
    fn name(&self) -> &str {
        &self.config.ns
    }

    fn subscriptions(&self) -> Vec<String> {
        let mut subs: Vec<String> = [
            leaf::CMD,
            leaf::BAY_GRANT,
            leaf::RESERVE_REPLY,
            leaf::GOAL_STATUS,
            leaf::REGISTER_REPLY,
            leaf::QUEUE_REPLY,
            leaf::RELEASE_REPLY,
        ]
        .iter()
        .map(|l| self.key(l))
        .collect();
        subs.push(topics::POSES.into());
        subs.push(topics::COORD_EVICTED.into());
        subs
    }

    fn tick_period_ns(&self) -> Option<i64> {
        Some(NODE_TICK_NS)
    }

    fn start(&mut self, now_ns: i64, out: &mut Outbox) {
        self.state = NodeState::new(now_ns);
        self.send_spawn(now_ns, out);
        self.send_register(now_ns, out);
        self.last_heartbeat_ns = now_ns;
        out.publish(self.key(leaf::HEARTBEAT), json!({}));
    }

    fn on_message(&mut self, env: &Envelope, now_ns: i64, out: &mut Outbox) {
        if env.key == topics::POSES {
            self.on_pose_snapshot(&env.payload);
            return;
        }
        if env.key == topics::COORD_EVICTED {
            if let Ok(e) = serde_json::from_value::<EvictedMsg>(env.payload.clone()) {
                if e.ns == self.config.ns {
                    error!(ns = self.config.ns, reason = e.reason, "evicted by managers");
                    self.failed = true;
                    self.finished = true;
                }
            }
            return;
        }
        let Some((_, leaf_name)) = topics::split_ns_key(&env.key) else {
            return;
        };
        match leaf_name {
            leaf::REGISTER_REPLY => {
                let Ok(reply) = serde_json::from_value::<Reply>(env.payload.clone()) else {
                    return;
                };
                if self.registered {
                    return;
                }
                if reply.ok {
                    info!(ns = self.config.ns, active = reply.active_count, "registered");
                    self.registered = true;
                    self.state.seq += 1;
                    self.send_status(false, out);
                } else {
                    error!(ns = self.config.ns, reason = reply.reason, "registration rejected");
                    self.failed = true;
                    self.finished = true;
                }
            }
            leaf::CMD => match serde_json::from_value::<CommandMsg>(env.payload.clone()) {
                Ok(cmd) if self.registered => self.handle(NodeEvent::Command(cmd.kind), now_ns, out),
                Ok(_) => warn!(ns = self.config.ns, "command before registration ignored"),
                Err(e) => warn!(ns = self.config.ns, error = %e, "malformed command"),
            },
            leaf::BAY_GRANT => self.handle(NodeEvent::BayGrant, now_ns, out),
            leaf::RESERVE_REPLY => {
                let Ok(reply) = serde_json::from_value::<ReserveReply>(env.payload.clone()) else {
                    warn!(ns = self.config.ns, "malformed reserve reply");
                    return;
                };
                let outcome = match reply {
                    ReserveReply::Grant { spot_id, .. } => ReserveOutcome::Grant(spot_id),
                    ReserveReply::Deny { reason } => ReserveOutcome::Deny(reason),
                };
                if let ReserveOutcome::Grant(spot_id) = outcome {
                    if self.state.phase != LifecycleState::SpotRequested {
                        // not asked for; hand it straight back
                        out.publish(self.key(leaf::RELEASE), ReleaseMsg::Spot { spot_id });
                        return;
                    }
                }
                self.handle(NodeEvent::ReserveReply(outcome), now_ns, out);
            }
            leaf::GOAL_STATUS => {
                let Ok(status) = serde_json::from_value::<GoalStatusMsg>(env.payload.clone()) else {
                    return;
                };
                if self.active_goal != Some(status.goal_id) {
                    return;
                }
                self.active_goal = None;
                let event = match status.status {
                    GoalOutcome::Reached => NodeEvent::GoalReached,
                    GoalOutcome::Failed => NodeEvent::GoalFailed,
                };
                self.handle(event, now_ns, out);
            }
            leaf::QUEUE_REPLY | leaf::RELEASE_REPLY => {
                if let Ok(reply) = serde_json::from_value::<Reply>(env.payload.clone()) {
                    if !reply.ok {
                        warn!(
                            ns = self.config.ns,
                            key = env.key,
                            reason = reply.reason,
                            "request rejected"
                        );
                    }
                }
            }
            _ => {}
        }
    }

    fn on_tick(&mut self, now_ns: i64, out: &mut Outbox) {
        if !self.spawned && now_ns - self.last_spawn_ns >= HANDSHAKE_RETRY_NS {
            self.send_spawn(now_ns, out);
        }
        if !self.registered && now_ns - self.last_register_ns >= HANDSHAKE_RETRY_NS {
            self.send_register(now_ns, out);
        }
        if now_ns - self.last_heartbeat_ns >= HEARTBEAT_NS {
            self.last_heartbeat_ns = now_ns;
            out.publish(self.key(leaf::HEARTBEAT), json!({}));
        }
        if self.registered {
            self.handle(NodeEvent::Tick, now_ns, out);
        }
    }

    fn is_finished(&self) -> bool {
        self.finished
    }
}
