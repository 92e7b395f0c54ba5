//! Checks evaluated from a bus recording alone.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::harness::tap::TapEntry;
use crate::topics::{
    self, leaf, split_ns_key, EvictedMsg, OccupancyMsg, Reply, ReserveReply, ReservedEntry, StatusMsg,
};
use crate::world::SpotId;

pub const RESERVATION_MUTEX: &str = "reservation-mutex";
pub const QUEUE_FIFO: &str = "queue-fifo";
pub const STATUS_SEQ_MONOTONIC: &str = "status-seq-monotonic";
pub const ZERO_COLLISIONS: &str = "zero-collisions";
pub const OCCUPANCY_PARTITION: &str = "occupancy-partition";
pub const GRANT_VALIDITY: &str = "grant-validity";
pub const SENDER_KEY_FIFO: &str = "sender-key-fifo";
pub const LAUNCH_ORDER: &str = "launch-order";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssertionResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl AssertionResult {
    fn pass(name: &str, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed: true,
            detail: detail.into(),
        }
    }

    fn fail(name: &str, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed: false,
            detail: detail.into(),
        }
    }

    fn from_errors(name: &str, checked: usize, what: &str, errors: Vec<String>) -> Self {
        match errors.first() {
            None => Self::pass(name, format!("{checked} {what} checked")),
            Some(first) => Self::fail(name, format!("{} violation(s); first: {first}", errors.len())),
        }
    }
}

impl std::fmt::Display for AssertionResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{}: {verdict} ({})", self.name, self.detail)
    }
}

/// Inputs that are not in the tap itself.
#[derive(Debug, Clone, Default)]
pub struct SuiteContext {
    /// All spot ids of the map; enables the coverage half of the partition
    /// check.
    pub spot_ids: Option<BTreeSet<SpotId>>,
    /// Components in the order they must become ready.
    pub launch_order: Vec<String>,
}

fn payload<T: serde::de::DeserializeOwned>(e: &TapEntry) -> Option<T> {
    serde_json::from_value(e.envelope.payload.clone()).ok()
}

fn from_managers(e: &TapEntry) -> bool {
    e.envelope.sender_id == topics::MANAGERS_ID
}

pub fn assert_suite(tap: &[TapEntry], ctx: &SuiteContext) -> Vec<AssertionResult> {
    vec![
        reservation_mutex(tap),
        queue_fifo(tap),
        status_seq_monotonic(tap),
        zero_collisions(tap),
        occupancy_partition(tap, ctx.spot_ids.as_ref()),
        grant_validity(tap),
        sender_key_fifo(tap),
        launch_order(tap, &ctx.launch_order),
    ]
}

/// Replays every published reservation table. A spot listed twice, or a
/// namespace listed twice, is reported with the interval until the next
/// table replaced it.
pub fn reservation_mutex(tap: &[TapEntry]) -> AssertionResult {
    let tables: Vec<(i64, Vec<ReservedEntry>)> = tap
        .iter()
        .filter(|e| e.envelope.key == topics::COORD_RESERVED)
        .filter_map(|e| Some((e.envelope.timestamp_ns, payload::<Vec<ReservedEntry>>(e)?)))
        .collect();
    let mut errors = Vec::new();
    for (i, (t, entries)) in tables.iter().enumerate() {
        let until = tables
            .get(i + 1)
            .map(|(t2, _)| t2.to_string())
            .unwrap_or_else(|| "end".into());
        let mut by_spot: BTreeMap<SpotId, Vec<&str>> = BTreeMap::new();
        let mut by_ns: BTreeMap<&str, Vec<SpotId>> = BTreeMap::new();
        for e in entries {
            by_spot.entry(e.spot_id).or_default().push(&e.ns);
            by_ns.entry(&e.ns).or_default().push(e.spot_id);
        }
        for (spot, holders) in by_spot.iter().filter(|(_, h)| h.len() > 1) {
            errors.push(format!(
                "spot {spot} held by {} during [{t}, {until})",
                holders.join(" and ")
            ));
        }
        for (ns, spots) in by_ns.iter().filter(|(_, s)| s.len() > 1) {
            errors.push(format!("{ns} holds spots {spots:?} during [{t}, {until})"));
        }
    }
    AssertionResult::from_errors(RESERVATION_MUTEX, tables.len(), "reservation tables", errors)
}

/// Bay grants must be handed out in the order enqueues were accepted,
/// skipping vehicles evicted or departed before their turn.
pub fn queue_fifo(tap: &[TapEntry]) -> AssertionResult {
    let mut expected: Vec<String> = Vec::new();
    let mut grants = 0usize;
    let mut errors = Vec::new();
    for e in tap.iter().filter(|e| from_managers(e)) {
        let key = e.envelope.key.as_str();
        if key == topics::COORD_EVICTED {
            if let Some(ev) = payload::<EvictedMsg>(e) {
                expected.retain(|n| *n != ev.ns);
            }
            continue;
        }
        let Some((ns, leaf_name)) = split_ns_key(key) else {
            continue;
        };
        match leaf_name {
            leaf::QUEUE_REPLY if payload::<Reply>(e).is_some_and(|r| r.ok) => expected.push(ns.to_string()),
            leaf::BAY_GRANT => {
                grants += 1;
                match expected.first() {
                    Some(head) if head == ns => {
                        expected.remove(0);
                    }
                    Some(head) => errors.push(format!("bay granted to {ns} while {head} was ahead")),
                    None => errors.push(format!("bay granted to {ns} which never enqueued")),
                }
            }
            _ => {}
        }
    }
    AssertionResult::from_errors(QUEUE_FIFO, grants, "bay grants", errors)
}

pub fn status_seq_monotonic(tap: &[TapEntry]) -> AssertionResult {
    let mut last: BTreeMap<String, u64> = BTreeMap::new();
    let mut errors = Vec::new();
    let mut n = 0;
    for e in tap {
        let Some((ns, leaf::STATUS)) = split_ns_key(&e.envelope.key) else {
            continue;
        };
        if e.envelope.sender_id != ns {
            continue;
        }
        let Some(msg) = payload::<StatusMsg>(e) else {
            errors.push(format!("malformed status from {ns}"));
            continue;
        };
        n += 1;
        if let Some(prev) = last.insert(ns.to_string(), msg.seq) {
            if msg.seq <= prev {
                errors.push(format!("{ns} status seq {} after {prev}", msg.seq));
            }
        }
    }
    AssertionResult::from_errors(STATUS_SEQ_MONOTONIC, n, "status updates", errors)
}

pub fn zero_collisions(tap: &[TapEntry]) -> AssertionResult {
    let hits: Vec<&TapEntry> = tap.iter().filter(|e| e.envelope.key == topics::COLLISION).collect();
    match hits.first() {
        None => AssertionResult::pass(ZERO_COLLISIONS, "0 collision events"),
        Some(first) => AssertionResult::fail(
            ZERO_COLLISIONS,
            format!("{} collision events; first {}", hits.len(), first.envelope.payload),
        ),
    }
}

pub fn occupancy_partition(tap: &[TapEntry], spot_ids: Option<&BTreeSet<SpotId>>) -> AssertionResult {
    let mut errors = Vec::new();
    let mut last_seq = 0u64;
    let mut universe: Option<BTreeSet<SpotId>> = spot_ids.cloned();
    let mut n = 0;
    for e in tap.iter().filter(|e| e.envelope.key == topics::OCCUPANCY) {
        let Some(f) = payload::<OccupancyMsg>(e) else {
            errors.push("malformed occupancy frame".into());
            continue;
        };
        n += 1;
        if f.frame_seq <= last_seq {
            errors.push(format!("frame_seq {} after {last_seq}", f.frame_seq));
        }
        last_seq = f.frame_seq;
        let occ: BTreeSet<SpotId> = f.occupied.iter().copied().collect();
        let avail: BTreeSet<SpotId> = f.available.iter().copied().collect();
        if occ.len() != f.occupied.len() || avail.len() != f.available.len() {
            errors.push(format!("frame {} lists a spot twice", f.frame_seq));
        }
        if let Some(both) = occ.intersection(&avail).next() {
            errors.push(format!(
                "frame {}: spot {both} both occupied and available",
                f.frame_seq
            ));
        }
        let union: BTreeSet<SpotId> = occ.union(&avail).copied().collect();
        match &universe {
            Some(all) if *all != union => {
                errors.push(format!("frame {} covers {:?}, expected {:?}", f.frame_seq, union, all))
            }
            Some(_) => {}
            None => universe = Some(union),
        }
    }
    AssertionResult::from_errors(OCCUPANCY_PARTITION, n, "occupancy frames", errors)
}

/// Each grant names an occupancy frame; the spot must be available in that
/// frame and unheld in the reservation table published just before the
/// grant took effect.
pub fn grant_validity(tap: &[TapEntry]) -> AssertionResult {
    let mut frames: BTreeMap<u64, BTreeSet<SpotId>> = BTreeMap::new();
    let mut tables: Vec<Vec<ReservedEntry>> = vec![Vec::new()];
    let mut errors = Vec::new();
    let mut n = 0;
    for e in tap {
        let key = e.envelope.key.as_str();
        if key == topics::OCCUPANCY {
            if let Some(f) = payload::<OccupancyMsg>(e) {
                frames.insert(f.frame_seq, f.available.into_iter().collect());
            }
            continue;
        }
        if !from_managers(e) {
            continue;
        }
        if key == topics::COORD_RESERVED {
            if let Some(t) = payload::<Vec<ReservedEntry>>(e) {
                tables.push(t);
            }
            continue;
        }
        let Some((ns, leaf::RESERVE_REPLY)) = split_ns_key(key) else {
            continue;
        };
        let Some(ReserveReply::Grant { spot_id, frame_seq }) = payload::<ReserveReply>(e) else {
            continue;
        };
        n += 1;
        match frames.get(&frame_seq) {
            None => errors.push(format!("grant of {spot_id} to {ns} cites unseen frame {frame_seq}")),
            Some(avail) if !avail.contains(&spot_id) => errors.push(format!(
                "grant of {spot_id} to {ns}: not available in frame {frame_seq}"
            )),
            Some(_) => {}
        }
        let k = tables.len();
        let after = &tables[k - 1];
        let before: &[ReservedEntry] = if k >= 2 { &tables[k - 2] } else { &[] };
        if !after.iter().any(|r| r.spot_id == spot_id && r.ns == ns) {
            errors.push(format!(
                "grant of {spot_id} to {ns} not reflected in the reservation table"
            ));
        }
        if let Some(r) = before.iter().find(|r| r.spot_id == spot_id) {
            errors.push(format!("grant of {spot_id} to {ns} while held by {}", r.ns));
        }
    }
    AssertionResult::from_errors(GRANT_VALIDITY, n, "grants", errors)
}

pub fn sender_key_fifo(tap: &[TapEntry]) -> AssertionResult {
    let mut last: BTreeMap<(&str, &str), u64> = BTreeMap::new();
    let mut errors = Vec::new();
    for e in tap {
        let k = (e.envelope.sender_id.as_str(), e.envelope.key.as_str());
        if let Some(prev) = last.insert(k, e.envelope.seq) {
            if e.envelope.seq <= prev {
                errors.push(format!("{}/{} seq {} after {prev}", k.0, k.1, e.envelope.seq));
            }
        }
    }
    AssertionResult::from_errors(SENDER_KEY_FIFO, tap.len(), "envelopes", errors)
}

pub fn launch_order(tap: &[TapEntry], expected: &[String]) -> AssertionResult {
    let prefix = format!("{}/", topics::READY_PREFIX);
    let seen: Vec<&str> = tap
        .iter()
        .filter_map(|e| e.envelope.key.strip_prefix(&prefix))
        .collect();
    if seen.is_empty() {
        return AssertionResult::pass(LAUNCH_ORDER, "no readiness events");
    }
    let mut position = BTreeMap::new();
    for (i, name) in seen.iter().enumerate() {
        position.entry(*name).or_insert(i);
    }
    let mut errors = Vec::new();
    let mut prev: Option<(&str, usize)> = None;
    for name in expected {
        let Some(&at) = position.get(name.as_str()) else {
            errors.push(format!("{name} never became ready"));
            continue;
        };
        if let Some((p, pat)) = prev {
            if at < pat {
                errors.push(format!("{name} ready before {p}"));
            }
        }
        prev = Some((name, at));
    }
    AssertionResult::from_errors(LAUNCH_ORDER, expected.len(), "components", errors)
}
