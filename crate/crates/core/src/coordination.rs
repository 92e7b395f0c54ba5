//! The managers: vehicle count, status, drop-off queue and spot
//! reservations, all driven from one event loop.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use avp_msgbus::Envelope;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tracing::{info, warn};

use crate::geometry::Vec2;
use crate::node::LifecycleState;
use crate::runtime::{Component, Outbox};
use crate::topics::{
    self, leaf, ns_key, EvictedMsg, OccupancyMsg, QueueMsg, ReleaseMsg, Reply, ReserveReply, ReservedEntry, StatusMsg,
    StatusRow, VehiclesMsg,
};
use crate::world::{LotMap, SpotId};

pub const MANAGER_TICK_NS: i64 = 100_000_000;
pub const REPUBLISH_NS: i64 = 1_000_000_000;
pub const DEFAULT_HEARTBEAT_TIMEOUT_NS: i64 = 5_000_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum AllocationPolicy {
    #[default]
    LowestId,
    /// Closest spot center to the vehicle's last reported pose; needs a map.
    Nearest,
}

#[derive(Debug, Clone)]
pub struct ManagersConfig {
    pub policy: AllocationPolicy,
    pub heartbeat_timeout_ns: i64,
    pub map: Option<Arc<LotMap>>,
}

impl Default for ManagersConfig {
    fn default() -> Self {
        Self {
            policy: AllocationPolicy::LowestId,
            heartbeat_timeout_ns: DEFAULT_HEARTBEAT_TIMEOUT_NS,
            map: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RosterEntry {
    pub joined_at_ns: i64,
    pub last_heartbeat_ns: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatestOccupancy {
    pub frame_seq: u64,
    pub available: BTreeSet<SpotId>,
}

#[derive(Debug, Default)]
pub struct Managers {
    config: ManagersConfig,
    roster: BTreeMap<String, RosterEntry>,
    status: BTreeMap<String, StatusRow>,
    last_pose: BTreeMap<String, Vec2>,
    queue: VecDeque<String>,
    /// Queue head that has already been sent its bay grant.
    granted: Option<String>,
    holders: BTreeMap<SpotId, String>,
    occupancy: Option<LatestOccupancy>,
    last_republish_ns: i64,
}

impl Managers {
    pub fn new(config: ManagersConfig) -> Self {
        Self {
            config,
            ..Self::default()
        }
    }

    pub fn roster(&self) -> &BTreeMap<String, RosterEntry> {
        &self.roster
    }

    pub fn status_table(&self) -> &BTreeMap<String, StatusRow> {
        &self.status
    }

    pub fn queue(&self) -> impl Iterator<Item = &str> {
        self.queue.iter().map(String::as_str)
    }

    pub fn holders(&self) -> &BTreeMap<SpotId, String> {
        &self.holders
    }

    pub fn spot_of(&self, ns: &str) -> Option<SpotId> {
        self.holders.iter().find(|(_, h)| *h == ns).map(|(s, _)| *s)
    }

    fn publish_vehicles(&self, out: &mut Outbox) {
        out.publish(
            topics::COORD_VEHICLES,
            VehiclesMsg {
                count: self.roster.len(),
                roster: self.roster.keys().cloned().collect(),
            },
        );
    }

    fn publish_status(&self, out: &mut Outbox) {
        out.publish(topics::COORD_STATUS, &self.status);
    }

    fn publish_queue(&self, out: &mut Outbox) {
        out.publish(
            topics::COORD_QUEUE,
            QueueMsg {
                order: self.queue.iter().cloned().collect(),
            },
        );
    }

    fn publish_reserved(&self, out: &mut Outbox) {
        let entries: Vec<ReservedEntry> = self
            .holders
            .iter()
            .map(|(&spot_id, ns)| ReservedEntry {
                spot_id,
                ns: ns.clone(),
            })
            .collect();
        out.publish(topics::COORD_RESERVED, entries);
    }

    pub fn publish_all(&self, out: &mut Outbox) {
        self.publish_vehicles(out);
        self.publish_status(out);
        self.publish_queue(out);
        self.publish_reserved(out);
    }

    pub fn register(&mut self, ns: &str, now_ns: i64, out: &mut Outbox) -> Result<usize, &'static str> {
        let reply_key = ns_key(ns, leaf::REGISTER_REPLY);
        if self.roster.contains_key(ns) {
            out.publish(reply_key, Reply::rejected("duplicate-namespace"));
            return Err("duplicate-namespace");
        }
        self.roster.insert(
            ns.to_string(),
            RosterEntry {
                joined_at_ns: now_ns,
                last_heartbeat_ns: now_ns,
            },
        );
        let count = self.roster.len();
        out.publish(
            reply_key,
            Reply {
                active_count: Some(count),
                ..Reply::ok()
            },
        );
        self.publish_vehicles(out);
        Ok(count)
    }

    pub fn heartbeat(&mut self, ns: &str, now_ns: i64) {
        match self.roster.get_mut(ns) {
            Some(e) => e.last_heartbeat_ns = e.last_heartbeat_ns.max(now_ns),
            None => warn!(ns, "heartbeat from unregistered vehicle"),
        }
    }

    /// Last-writer-wins by sequence. Returns whether the row changed.
    pub fn update_status(&mut self, msg: &StatusMsg, now_ns: i64, out: &mut Outbox) -> bool {
        if !self.roster.contains_key(&msg.ns) {
            warn!(ns = msg.ns, "status from unregistered vehicle ignored");
            return false;
        }
        if self.status.get(&msg.ns).is_some_and(|row| msg.seq <= row.seq) {
            return false;
        }
        self.status.insert(
            msg.ns.clone(),
            StatusRow {
                state: msg.state,
                seq: msg.seq,
                updated_at_ns: now_ns,
            },
        );
        if let Some(p) = msg.pose {
            self.last_pose.insert(msg.ns.clone(), p.position());
        }
        self.publish_status(out);
        if msg.state == LifecycleState::Departed {
            // a departed vehicle leaves the lot; drop everything it still holds
            self.roster.remove(&msg.ns);
            self.drop_queue_entry(&msg.ns, out);
            if let Some(spot) = self.spot_of(&msg.ns) {
                self.holders.remove(&spot);
                self.publish_reserved(out);
            }
            self.publish_vehicles(out);
        }
        true
    }

    fn grant_head(&mut self, out: &mut Outbox) {
        let Some(head) = self.queue.front() else {
            self.granted = None;
            return;
        };
        if self.granted.as_deref() != Some(head.as_str()) {
            self.granted = Some(head.clone());
            out.publish(ns_key(head, leaf::BAY_GRANT), json!({"ns": head}));
        }
    }

    fn drop_queue_entry(&mut self, ns: &str, out: &mut Outbox) -> bool {
        let Some(pos) = self.queue.iter().position(|q| q == ns) else {
            return false;
        };
        self.queue.remove(pos);
        self.publish_queue(out);
        self.grant_head(out);
        true
    }

    pub fn enqueue_dropoff(&mut self, ns: &str, out: &mut Outbox) -> Result<usize, &'static str> {
        let reply_key = ns_key(ns, leaf::QUEUE_REPLY);
        let err = if !self.roster.contains_key(ns) {
            Some("not-registered")
        } else if self.queue.iter().any(|q| q == ns) {
            Some("already-queued")
        } else {
            None
        };
        if let Some(reason) = err {
            out.publish(reply_key, Reply::rejected(reason));
            return Err(reason);
        }
        self.queue.push_back(ns.to_string());
        let position = self.queue.len();
        out.publish(
            reply_key,
            Reply {
                position: Some(position),
                ..Reply::ok()
            },
        );
        self.publish_queue(out);
        self.grant_head(out);
        Ok(position)
    }

    pub fn release_dropoff(&mut self, ns: &str, out: &mut Outbox) -> Result<(), &'static str> {
        if self.queue.front().map(String::as_str) != Some(ns) {
            out.publish(ns_key(ns, leaf::RELEASE_REPLY), Reply::rejected("not-head"));
            return Err("not-head");
        }
        self.drop_queue_entry(ns, out);
        out.publish(ns_key(ns, leaf::RELEASE_REPLY), Reply::ok());
        Ok(())
    }

    pub fn set_occupancy(&mut self, msg: &OccupancyMsg) {
        if self.occupancy.as_ref().is_some_and(|o| msg.frame_seq <= o.frame_seq) {
            return;
        }
        self.occupancy = Some(LatestOccupancy {
            frame_seq: msg.frame_seq,
            available: msg.available.iter().copied().collect(),
        });
    }

    fn choose(&self, ns: &str, candidates: &BTreeSet<SpotId>) -> Option<SpotId> {
        let lowest = candidates.iter().next().copied();
        match (self.config.policy, &self.config.map, self.last_pose.get(ns)) {
            (AllocationPolicy::Nearest, Some(map), Some(&from)) => candidates
                .iter()
                .filter_map(|&id| Some((id, map.spot(id)?.rect.center().dist(from))))
                .fold(None, |best: Option<(SpotId, f64)>, c| match best {
                    Some(b) if b.1 <= c.1 => Some(b),
                    _ => Some(c),
                })
                .map(|(id, _)| id)
                .or(lowest),
            _ => lowest,
        }
    }

    pub fn request_reservation(&mut self, ns: &str, out: &mut Outbox) -> ReserveReply {
        let reply = self.decide_reservation(ns);
        if let ReserveReply::Grant { spot_id, .. } = &reply {
            self.holders.insert(*spot_id, ns.to_string());
            self.publish_reserved(out);
        }
        out.publish(ns_key(ns, leaf::RESERVE_REPLY), &reply);
        reply
    }

    fn decide_reservation(&self, ns: &str) -> ReserveReply {
        let deny = |reason: &str| ReserveReply::Deny {
            reason: reason.to_string(),
        };
        if !self.roster.contains_key(ns) {
            return deny("not-registered");
        }
        if self.spot_of(ns).is_some() {
            return deny("already-holds");
        }
        let Some(occ) = &self.occupancy else {
            return deny("no-occupancy");
        };
        let candidates: BTreeSet<SpotId> = occ
            .available
            .iter()
            .copied()
            .filter(|s| !self.holders.contains_key(s))
            .collect();
        match self.choose(ns, &candidates) {
            Some(spot_id) => ReserveReply::Grant {
                spot_id,
                frame_seq: occ.frame_seq,
            },
            None => deny("no-spot"),
        }
    }

    pub fn release_reservation(&mut self, ns: &str, spot_id: SpotId, out: &mut Outbox) -> Result<(), &'static str> {
        if self.holders.get(&spot_id).map(String::as_str) != Some(ns) {
            out.publish(ns_key(ns, leaf::RELEASE_REPLY), Reply::rejected("not-holder"));
            return Err("not-holder");
        }
        self.holders.remove(&spot_id);
        self.publish_reserved(out);
        out.publish(ns_key(ns, leaf::RELEASE_REPLY), Reply::ok());
        Ok(())
    }

    /// Evicts every vehicle whose last heartbeat is older than the timeout,
    /// freeing its queue slot and reservation.
    pub fn expire_stale(&mut self, now_ns: i64, out: &mut Outbox) -> Vec<String> {
        let stale: Vec<String> = self
            .roster
            .iter()
            .filter(|(_, e)| now_ns - e.last_heartbeat_ns > self.config.heartbeat_timeout_ns)
            .map(|(ns, _)| ns.clone())
            .collect();
        for ns in &stale {
            self.roster.remove(ns);
            let released_spot = self.spot_of(ns);
            if let Some(spot) = released_spot {
                self.holders.remove(&spot);
            }
            let was_queued = self.drop_queue_entry(ns, out);
            info!(ns, ?released_spot, was_queued, "evicted after heartbeat timeout");
            out.publish(
                topics::COORD_EVICTED,
                EvictedMsg {
                    ns: ns.clone(),
                    reason: "heartbeat-timeout".into(),
                    released_spot,
                    was_queued,
                },
            );
        }
        if !stale.is_empty() {
            self.publish_vehicles(out);
            self.publish_reserved(out);
        }
        stale
    }
}

impl Component for Managers {
    fn name(&self) -> &str {
        topics::MANAGERS_ID
    }

    fn subscriptions(&self) -> Vec<String> {
        [
            leaf::REGISTER,
            leaf::HEARTBEAT,
            leaf::STATUS,
            leaf::QUEUE_REQ,
            leaf::RESERVE_REQUEST,
            leaf::RELEASE,
        ]
        .iter()
        .map(|l| format!("avp/*/{l}"))
        .chain([topics::OCCUPANCY.to_string()])
        .collect()
    }

    fn tick_period_ns(&self) -> Option<i64> {
        Some(MANAGER_TICK_NS)
    }

    fn start(&mut self, now_ns: i64, out: &mut Outbox) {
        self.last_republish_ns = now_ns;
        self.publish_all(out);
    }

    fn on_message(&mut self, env: &Envelope, now_ns: i64, out: &mut Outbox) {
        if env.key == topics::OCCUPANCY {
            match serde_json::from_value::<OccupancyMsg>(env.payload.clone()) {
                Ok(m) => self.set_occupancy(&m),
                Err(e) => warn!(error = %e, "malformed occupancy frame"),
            }
            return;
        }
        let Some((ns, leaf_name)) = topics::split_ns_key(&env.key) else {
            return;
        };
        let ns = ns.to_string();
        // any traffic from a vehicle proves it is alive
        if leaf_name != leaf::REGISTER {
            self.heartbeat(&ns, now_ns);
        }
        match leaf_name {
            leaf::REGISTER => {
                let _ = self.register(&ns, now_ns, out);
            }
            leaf::HEARTBEAT => {}
            leaf::STATUS => match serde_json::from_value::<StatusMsg>(env.payload.clone()) {
                Ok(msg) if msg.ns == ns => {
                    self.update_status(&msg, now_ns, out);
                }
                Ok(msg) => warn!(key = env.key, claimed = msg.ns, "status namespace mismatch"),
                Err(e) => warn!(key = env.key, error = %e, "malformed status"),
            },
            leaf::QUEUE_REQ => {
                let _ = self.enqueue_dropoff(&ns, out);
            }
            leaf::RESERVE_REQUEST => {
                self.request_reservation(&ns, out);
            }
            leaf::RELEASE => match serde_json::from_value::<ReleaseMsg>(env.payload.clone()) {
                Ok(ReleaseMsg::Bay) => {
                    let _ = self.release_dropoff(&ns, out);
                }
                Ok(ReleaseMsg::Spot { spot_id }) => {
                    let _ = self.release_reservation(&ns, spot_id, out);
                }
                Err(e) => warn!(key = env.key, error = %e, "malformed release"),
            },
            _ => {}
        }
    }

    fn on_tick(&mut self, now_ns: i64, out: &mut Outbox) {
        self.expire_stale(now_ns, out);
        if now_ns - self.last_republish_ns >= REPUBLISH_NS {
            self.last_republish_ns = now_ns;
            self.publish_all(out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn occ(seq: u64, available: &[SpotId]) -> OccupancyMsg {
        OccupancyMsg {
            frame_seq: seq,
            pose_seq: seq,
            occupied: vec![],
            available: available.to_vec(),
        }
    }

    fn managers_with(ns: &[&str]) -> (Managers, Outbox) {
        let mut m = Managers::new(ManagersConfig::default());
        let mut out = Outbox::default();
        for n in ns {
            m.register(n, 0, &mut out).unwrap();
        }
        (m, out)
    }

    #[test]
    fn register_counts_and_rejects_duplicates() {
        let (mut m, mut out) = managers_with(&["v1", "v2"]);
        assert_eq!(m.register("v3", 0, &mut out), Ok(3));
        assert_eq!(m.register("v1", 0, &mut out), Err("duplicate-namespace"));
        assert_eq!(m.roster().len(), 3);
    }

    #[test]
    fn status_is_last_writer_wins_by_seq() {
        let (mut m, mut out) = managers_with(&["v1"]);
        let msg = |seq, state| StatusMsg {
            ns: "v1".into(),
            state,
            seq,
            failed: false,
            spot_id: None,
            pose: None,
        };
        assert!(m.update_status(&msg(5, LifecycleState::Parked), 1, &mut out));
        assert!(!m.update_status(&msg(4, LifecycleState::Arriving), 2, &mut out));
        assert_eq!(m.status_table()["v1"].state, LifecycleState::Parked);
        assert!(m.update_status(&msg(6, LifecycleState::RetrievalRequested), 3, &mut out));
        assert_eq!(m.status_table()["v1"].seq, 6);
    }

    #[test]
    fn only_head_gets_the_bay() {
        let (mut m, _) = managers_with(&["v1", "v2"]);
        let mut out = Outbox::default();
        assert_eq!(m.enqueue_dropoff("v1", &mut out), Ok(1));
        assert_eq!(m.enqueue_dropoff("v2", &mut out), Ok(2));
        assert_eq!(m.enqueue_dropoff("v2", &mut out), Err("already-queued"));
        let grants: Vec<&str> = out
            .messages()
            .iter()
            .filter(|(k, _)| k.ends_with("/bay_grant"))
            .map(|(k, _)| k.as_str())
            .collect();
        assert_eq!(grants, ["avp/v1/bay_grant"]);
        assert_eq!(m.release_dropoff("v2", &mut out), Err("not-head"));
        let mut out = Outbox::default();
        m.release_dropoff("v1", &mut out).unwrap();
        assert!(out.messages().iter().any(|(k, _)| k == "avp/v2/bay_grant"));
    }

    #[test]
    fn smallest_available_unheld_spot_is_granted() {
        let (mut m, mut out) = managers_with(&["v1", "v2", "v3"]);
        assert_eq!(
            m.request_reservation("v1", &mut out),
            ReserveReply::Deny {
                reason: "no-occupancy".into()
            }
        );
        m.set_occupancy(&occ(1, &[2, 5, 7]));
        assert_eq!(
            m.request_reservation("v1", &mut out),
            ReserveReply::Grant {
                spot_id: 2,
                frame_seq: 1
            }
        );
        assert_eq!(
            m.request_reservation("v1", &mut out),
            ReserveReply::Deny {
                reason: "already-holds".into()
            }
        );
        m.set_occupancy(&occ(2, &[2]));
        assert_eq!(
            m.request_reservation("v2", &mut out),
            ReserveReply::Deny {
                reason: "no-spot".into()
            }
        );
        assert_eq!(m.release_reservation("v2", 2, &mut out), Err("not-holder"));
        m.release_reservation("v1", 2, &mut out).unwrap();
        assert_eq!(
            m.request_reservation("v3", &mut out),
            ReserveReply::Grant {
                spot_id: 2,
                frame_seq: 2
            }
        );
    }

    #[test]
    fn stale_vehicle_is_evicted_with_its_holdings() {
        let (mut m, mut out) = managers_with(&["v1", "v2"]);
        m.set_occupancy(&occ(1, &[4]));
        m.enqueue_dropoff("v1", &mut out).unwrap();
        m.enqueue_dropoff("v2", &mut out).unwrap();
        m.request_reservation("v1", &mut out);
        m.heartbeat("v2", 4_000_000_000);
        let mut out = Outbox::default();
        assert!(m.expire_stale(5_000_000_000, &mut out).is_empty());
        assert_eq!(m.expire_stale(5_000_000_001, &mut out), vec!["v1".to_string()]);
        assert!(m.holders().is_empty());
        assert_eq!(m.queue().collect::<Vec<_>>(), ["v2"]);
        assert!(out.messages().iter().any(|(k, _)| k == "avp/v2/bay_grant"));
    }

    #[test]
    fn departed_vehicle_leaves_roster() {
        let (mut m, mut out) = managers_with(&["v1"]);
        let msg = StatusMsg {
            ns: "v1".into(),
            state: LifecycleState::Departed,
            seq: 9,
            failed: false,
            spot_id: None,
            pose: None,
        };
        m.update_status(&msg, 1, &mut out);
        assert!(m.roster().is_empty());
        assert_eq!(m.status_table()["v1"].state, LifecycleState::Departed);
    }
}
