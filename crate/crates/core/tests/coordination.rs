use std::collections::{BTreeMap, BTreeSet};

use avp_core::coordination::{Managers, ManagersConfig, DEFAULT_HEARTBEAT_TIMEOUT_NS};
use avp_core::node::LifecycleState;
use avp_core::runtime::Outbox;
use avp_core::topics::{self, OccupancyMsg, ReserveReply, ReservedEntry, StatusMsg, StatusTableMsg};
use proptest::prelude::*;

const NAMES: [&str; 4] = ["v1", "v2", "v3", "v4"];
const SPOTS: u32 = 6;

#[derive(Debug, Clone)]
enum Op {
    Register(usize),
    Heartbeat(usize),
    Status(usize, u64, LifecycleState),
    Enqueue(usize),
    ReleaseBay(usize),
    Occupancy(Vec<u32>),
    Reserve(usize),
    Release(usize, u32),
    Advance(i64),
    Expire,
}

fn arb_state() -> impl Strategy<Value = LifecycleState> {
    // DEPARTED is rare so that rosters stay populated
    prop_oneof![
        9 => prop::sample::select(LifecycleState::ALL[..10].to_vec()),
        1 => Just(LifecycleState::Departed),
    ]
}

fn arb_op() -> impl Strategy<Value = Op> {
    let v = 0..NAMES.len();
    prop_oneof![
        2 => v.clone().prop_map(Op::Register),
        2 => v.clone().prop_map(Op::Heartbeat),
        3 => (v.clone(), 0u64..12, arb_state()).prop_map(|(i, s, st)| Op::Status(i, s, st)),
        2 => v.clone().prop_map(Op::Enqueue),
        2 => v.clone().prop_map(Op::ReleaseBay),
        1 => prop::collection::btree_set(1..=SPOTS, 0..=SPOTS as usize).prop_map(|s| Op::Occupancy(s.into_iter().collect())),
        3 => v.clone().prop_map(Op::Reserve),
        2 => (v, 1..=SPOTS).prop_map(|(i, s)| Op::Release(i, s)),
        1 => (0i64..3_000_000_000).prop_map(Op::Advance),
        1 => Just(Op::Expire),
    ]
}

/// Straight-line reference for the managers' state.
#[derive(Default)]
struct Model {
    roster: BTreeMap<String, i64>,
    status: BTreeMap<String, (u64, LifecycleState)>,
    queue: Vec<String>,
    holders: BTreeMap<u32, String>,
    available: Option<(u64, BTreeSet<u32>)>,
    bay_grants: Vec<String>,
    enqueued: Vec<String>,
}

impl Model {
    fn holds(&self, ns: &str) -> Option<u32> {
        self.holders.iter().find(|(_, h)| *h == ns).map(|(s, _)| *s)
    }

    fn drop_from_queue(&mut self, ns: &str) {
        let head = self.queue.first().cloned();
        self.queue.retain(|q| q != ns);
        if self.queue.first() != head.as_ref() {
            if let Some(h) = self.queue.first() {
                self.bay_grants.push(h.clone());
            }
        }
    }
}

/// Keys and payloads published by one call.
fn published(out: &mut Outbox) -> Vec<(String, serde_json::Value)> {
    out.drain().collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn managers_follow_the_reference_model(ops in prop::collection::vec(arb_op(), 1..120)) {
        let mut m = Managers::new(ManagersConfig::default());
        let mut r = Model::default();
        let mut now = 1_000i64;
        let mut occ_seq = 0u64;
        let mut out = Outbox::default();
        let mut seen_bay_grants = Vec::new();
        let mut reserved_tables = Vec::new();

        for op in ops {
            match op {
                Op::Register(i) => {
                    let ns = NAMES[i];
                    let got = m.register(ns, now, &mut out);
                    if r.roster.contains_key(ns) {
                        prop_assert_eq!(got, Err("duplicate-namespace"));
                    } else {
                        r.roster.insert(ns.into(), now);
                        prop_assert_eq!(got, Ok(r.roster.len()));
                    }
                }
                Op::Heartbeat(i) => {
                    m.heartbeat(NAMES[i], now);
                    if let Some(t) = r.roster.get_mut(NAMES[i]) {
                        *t = (*t).max(now);
                    }
                }
                Op::Status(i, seq, state) => {
                    let ns = NAMES[i];
                    let msg = StatusMsg { ns: ns.into(), state, seq, failed: false, spot_id: None, pose: None };
                    let applied = m.update_status(&msg, now, &mut out);
                    let expect = r.roster.contains_key(ns) && r.status.get(ns).is_none_or(|(s, _)| seq > *s);
                    prop_assert_eq!(applied, expect);
                    if expect {
                        r.status.insert(ns.into(), (seq, state));
                        if state == LifecycleState::Departed {
                            r.roster.remove(ns);
                            r.drop_from_queue(ns);
                            if let Some(s) = r.holds(ns) {
                                r.holders.remove(&s);
                            }
                        }
                    }
                }
                Op::Enqueue(i) => {
                    let ns = NAMES[i];
                    let got = m.enqueue_dropoff(ns, &mut out);
                    if !r.roster.contains_key(ns) {
                        prop_assert_eq!(got, Err("not-registered"));
                    } else if r.queue.iter().any(|q| q == ns) {
                        prop_assert_eq!(got, Err("already-queued"));
                    } else {
                        r.queue.push(ns.into());
                        r.enqueued.push(ns.into());
                        if r.queue.len() == 1 {
                            r.bay_grants.push(ns.into());
                        }
                        prop_assert_eq!(got, Ok(r.queue.len()));
                    }
                }
                Op::ReleaseBay(i) => {
                    let ns = NAMES[i];
                    let got = m.release_dropoff(ns, &mut out);
                    if r.queue.first().map(String::as_str) == Some(ns) {
                        prop_assert_eq!(got, Ok(()));
                        r.drop_from_queue(ns);
                    } else {
                        prop_assert_eq!(got, Err("not-head"));
                    }
                }
                Op::Occupancy(avail) => {
                    occ_seq += 1;
                    let occupied = (1..=SPOTS).filter(|s| !avail.contains(s)).collect();
                    m.set_occupancy(&OccupancyMsg { frame_seq: occ_seq, pose_seq: 0, occupied, available: avail.clone() });
                    r.available = Some((occ_seq, avail.into_iter().collect()));
                }
                Op::Reserve(i) => {
                    let ns = NAMES[i];
                    let got = m.request_reservation(ns, &mut out);
                    let expect = if !r.roster.contains_key(ns) {
                        ReserveReply::Deny { reason: "not-registered".into() }
                    } else if r.holds(ns).is_some() {
                        ReserveReply::Deny { reason: "already-holds".into() }
                    } else {
                        match &r.available {
                            None => ReserveReply::Deny { reason: "no-occupancy".into() },
                            Some((seq, avail)) => match avail.iter().find(|s| !r.holders.contains_key(s)) {
                                Some(&spot_id) => ReserveReply::Grant { spot_id, frame_seq: *seq },
                                None => ReserveReply::Deny { reason: "no-spot".into() },
                            },
                        }
                    };
                    if let ReserveReply::Grant { spot_id, .. } = &expect {
                        r.holders.insert(*spot_id, ns.into());
                    }
                    prop_assert_eq!(got, expect);
                }
                Op::Release(i, spot) => {
                    let ns = NAMES[i];
                    let got = m.release_reservation(ns, spot, &mut out);
                    if r.holders.get(&spot).map(String::as_str) == Some(ns) {
                        r.holders.remove(&spot);
                        prop_assert_eq!(got, Ok(()));
                    } else {
                        prop_assert_eq!(got, Err("not-holder"));
                    }
                }
                Op::Advance(dt) => now += dt,
                Op::Expire => {
                    let got = m.expire_stale(now, &mut out);
                    let stale: Vec<String> = r
                        .roster
                        .iter()
                        .filter(|(_, &t)| now - t > DEFAULT_HEARTBEAT_TIMEOUT_NS)
                        .map(|(ns, _)| ns.clone())
                        .collect();
                    for ns in &stale {
                        r.roster.remove(ns);
                        if let Some(s) = r.holds(ns) {
                            r.holders.remove(&s);
                        }
                        r.drop_from_queue(ns);
                    }
                    prop_assert_eq!(got, stale);
                }
            }

            for (key, payload) in published(&mut out) {
                if key.ends_with("/bay_grant") {
                    seen_bay_grants.push(topics::split_ns_key(&key).unwrap().0.to_string());
                }
                if key == topics::COORD_RESERVED {
                    reserved_tables.push(serde_json::from_value::<Vec<ReservedEntry>>(payload.clone()).unwrap());
                }
                if key == topics::COORD_STATUS {
                    let table: StatusTableMsg = serde_json::from_value(payload).unwrap();
                    let shown: BTreeMap<String, (u64, LifecycleState)> =
                        table.into_iter().map(|(ns, row)| (ns, (row.seq, row.state))).collect();
                    prop_assert_eq!(&shown, &r.status);
                }
            }

            let holders: BTreeMap<u32, String> = m.holders().clone();
            prop_assert_eq!(&holders, &r.holders);
            prop_assert_eq!(m.queue().collect::<Vec<_>>(), r.queue.iter().map(String::as_str).collect::<Vec<_>>());
            prop_assert_eq!(m.roster().keys().cloned().collect::<Vec<_>>(), r.roster.keys().cloned().collect::<Vec<_>>());
            let status: BTreeMap<String, (u64, LifecycleState)> =
                m.status_table().iter().map(|(ns, row)| (ns.clone(), (row.seq, row.state))).collect();
            prop_assert_eq!(&status, &r.status);
        }

        // every published reservation table is a partial injection
        for table in &reserved_tables {
            let spots: BTreeSet<u32> = table.iter().map(|e| e.spot_id).collect();
            let owners: BTreeSet<&str> = table.iter().map(|e| e.ns.as_str()).collect();
            prop_assert_eq!(spots.len(), table.len());
            prop_assert_eq!(owners.len(), table.len());
        }
        // the bay is handed out in enqueue order, skipping whoever left
        let mut rest = r.enqueued.iter();
        for g in &seen_bay_grants {
            prop_assert!(rest.any(|e| e == g), "bay grant to {} out of enqueue order", g);
        }
        prop_assert_eq!(seen_bay_grants, r.bay_grants);
    }
}

/// Replays interleaved status streams from three vehicles in a fixed
/// message order and checks the table against the per-vehicle maximum.
#[test]
fn status_table_is_per_vehicle_max_seq() {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let mut m = Managers::new(ManagersConfig::default());
        let mut out = Outbox::default();
        let mut msgs = Vec::new();
        for ns in ["v1", "v2", "v3"] {
            m.register(ns, 0, &mut out).unwrap();
            for seq in 1..=20u64 {
                let state = LifecycleState::ALL[(seq as usize) % 10];
                msgs.push(StatusMsg {
                    ns: ns.into(),
                    state,
                    seq,
                    failed: false,
                    spot_id: None,
                    pose: None,
                });
            }
        }
        msgs.shuffle(&mut rng);
        let mut expected: BTreeMap<String, (u64, LifecycleState)> = BTreeMap::new();
        for (t, msg) in msgs.iter().enumerate() {
            m.update_status(msg, t as i64, &mut out);
            let e = expected.entry(msg.ns.clone()).or_insert((0, msg.state));
            if msg.seq > e.0 {
                *e = (msg.seq, msg.state);
            }
        }
        let got: BTreeMap<String, (u64, LifecycleState)> = m
            .status_table()
            .iter()
            .map(|(ns, r)| (ns.clone(), (r.seq, r.state)))
            .collect();
        assert_eq!(got, expected);
        assert!(got.values().all(|(s, _)| *s == 20));
    }
}

#[test]
fn same_tick_requests_get_distinct_spots_in_arrival_order() {
    let mut m = Managers::new(ManagersConfig::default());
    let mut out = Outbox::default();
    for ns in ["v1", "v2", "v3"] {
        m.register(ns, 0, &mut out).unwrap();
    }
    m.set_occupancy(&OccupancyMsg {
        frame_seq: 1,
        pose_seq: 0,
        occupied: vec![],
        available: vec![4, 5, 6],
    });
    let grants: Vec<u32> = ["v3", "v1", "v2"]
        .iter()
        .map(|ns| match m.request_reservation(ns, &mut out) {
            ReserveReply::Grant { spot_id, .. } => spot_id,
            other => panic!("{ns}: {other:?}"),
        })
        .collect();
    assert_eq!(grants, [4, 5, 6]);
    assert_eq!(m.spot_of("v3"), Some(4));
    assert!(
        matches!(m.request_reservation("v1", &mut out), ReserveReply::Deny { reason } if reason == "already-holds")
    );
}
