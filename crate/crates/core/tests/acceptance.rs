//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Live criteria start real component processes
//! through the `avp` binary.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::{FRAC_PI_4, PI};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use avp_core::coordination::{DEFAULT_HEARTBEAT_TIMEOUT_NS, MANAGER_TICK_NS};
use avp_core::geometry::{oriented_rect_overlap, OrientedRect};
use avp_core::harness::assertions::{QUEUE_FIFO, RESERVATION_MUTEX};
use avp_core::harness::live::{run_live_scenario, LiveOptions};
use avp_core::harness::operator::KILLED_KEY;
use avp_core::harness::report::{ReservationAction, TAP_FILE};
use avp_core::harness::sim::run_sim;
use avp_core::harness::tap::read_tap;
use avp_core::harness::{RunReport, TapEntry};
use avp_core::node::{transition, LifecycleState as S};
use avp_core::topics::{self, EvictedMsg, OccupancyMsg, PoseRecord, ReservedEntry, StatusMsg};
use avp_msgbus::{rtt_probe, spawn_echo_responder, Router, RouterConfig, Session};
use common::fsm_table::{contexts, event, expected, fixture, tags, EVENTS, TABLE};
use common::oracles::{monte_carlo_overlap, mutex_violations, random_scenario, truth};
use common::{scenario, scenario_path};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Check = fn() -> Outcome;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {{
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    }};
}

fn main() {
    let criteria: [(&str, Check); 10] = [
        ("reservation mutual exclusion", reservation_mutex),
        ("two-vehicle end-to-end", two_vehicle),
        ("three-vehicle end-to-end", three_vehicle),
        ("queue FIFO", queue_fifo),
        ("occupancy fidelity", occupancy_fidelity),
        ("geometry oracle", geometry_oracle),
        ("RTT report format and sanity", rtt),
        ("determinism", determinism),
        ("transition-table totality", totality),
        ("eviction recovery", eviction),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn live(name: &str) -> Result<(RunReport, Vec<TapEntry>), String> {
    let out_dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&out_dir);
    let opts = LiveOptions {
        exe: PathBuf::from(env!("CARGO_BIN_EXE_avp")),
        router: None,
        out_dir: out_dir.clone(),
    };
    let report = run_live_scenario(&scenario_path(name), &opts).map_err(|e| format!("{name}: {e:#}"))?;
    let tap = read_tap(out_dir.join(TAP_FILE)).map_err(|e| format!("{name}: {e}"))?;
    if let Some(why) = &report.aborted {
        return Err(format!("{name} aborted: {why}"));
    }
    Ok((report, tap))
}

fn failed_assertions(r: &RunReport) -> Vec<String> {
    r.assertion_results
        .iter()
        .filter(|a| !a.passed)
        .map(|a| a.to_string())
        .collect()
}

fn reservation_mutex() -> Outcome {
    let seeds: Vec<u64> = (0..100).collect();
    let workers = std::thread::available_parallelism().map_or(4, |n| n.get());
    let chunk = seeds.len().div_ceil(workers);
    let results: Vec<Result<(), String>> = std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    for &seed in part {
                        let out = run_sim(&random_scenario(seed)).map_err(|e| format!("seed {seed}: {e}"))?;
                        let bad = mutex_violations(&out.tap);
                        ensure!(bad.is_empty(), "seed {seed}: {bad:?}");
                        let checker = out
                            .report
                            .assertion_results
                            .iter()
                            .find(|a| a.name == RESERVATION_MUTEX);
                        ensure!(checker.is_some_and(|a| a.passed), "seed {seed}: checker {checker:?}");
                        ensure!(
                            out.report.collisions == 0,
                            "seed {seed}: {} collisions",
                            out.report.collisions
                        );
                        ensure!(out.report.aborted.is_none(), "seed {seed}: {:?}", out.report.aborted);
                    }
                    Ok(())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for r in results {
        r?;
    }
    Ok(format!(
        "{} randomized runs, no double holders, every vehicle finished",
        seeds.len()
    ))
}

fn two_vehicle() -> Outcome {
    let (r, _) = live("two_host")?;
    let bad = failed_assertions(&r);
    ensure!(bad.is_empty(), "{bad:?}");
    ensure!(r.collisions == 0, "{} collisions", r.collisions);
    for ns in ["v1", "v2"] {
        let states = r.states_of(ns);
        ensure!(states.contains(&S::Parked), "{ns} never parked: {states:?}");
    }
    Ok(format!("v1 and v2 parked, 0 collisions, final {:?}", r.final_states))
}

/// Spot held by each vehicle the first time all `n` are parked at once.
fn spots_when_all_parked(tap: &[TapEntry], n: usize) -> Option<BTreeMap<String, u32>> {
    let mut holding = BTreeMap::new();
    let mut parked = BTreeSet::new();
    for e in tap {
        let env = &e.envelope;
        if env.key == topics::COORD_RESERVED && env.sender_id == topics::MANAGERS_ID {
            let t: Vec<ReservedEntry> = serde_json::from_value(env.payload.clone()).ok()?;
            holding = t.into_iter().map(|r| (r.ns, r.spot_id)).collect();
        }
        if let Some((ns, topics::leaf::STATUS)) = topics::split_ns_key(&env.key) {
            let st: StatusMsg = serde_json::from_value(env.payload.clone()).ok()?;
            if st.state == S::Parked {
                parked.insert(ns.to_string());
            } else {
                parked.remove(ns);
            }
            if parked.len() == n {
                return Some(
                    parked
                        .iter()
                        .filter_map(|ns| Some((ns.clone(), *holding.get(ns)?)))
                        .collect(),
                );
            }
        }
    }
    None
}

fn three_vehicle() -> Outcome {
    let (r, tap) = live("three_host")?;
    let bad = failed_assertions(&r);
    ensure!(bad.is_empty(), "{bad:?}");
    ensure!(r.collisions == 0, "{} collisions", r.collisions);
    let spots = spots_when_all_parked(&tap, 3).ok_or("the three vehicles were never parked together")?;
    let distinct: BTreeSet<u32> = spots.values().copied().collect();
    ensure!(spots.len() == 3 && distinct.len() == 3, "spots {spots:?}");
    for ns in ["v1", "v2", "v3"] {
        ensure!(
            r.final_states.get(ns) == Some(&S::Departed),
            "{ns} ended {:?}",
            r.final_states.get(ns)
        );
    }
    Ok(format!("parked in {spots:?}, then all DEPARTED"))
}

fn queue_fifo() -> Outcome {
    let (r, _) = live("queue_fifo")?;
    let mut everyone = r.enqueue_order.clone();
    everyone.sort();
    ensure!(
        everyone == ["v1", "v2", "v3", "v4", "v5"],
        "enqueued {:?}",
        r.enqueue_order
    );
    ensure!(
        r.bay_order == r.enqueue_order,
        "bay {:?} vs enqueue {:?}",
        r.bay_order,
        r.enqueue_order
    );
    let checker = r.assertion_results.iter().find(|a| a.name == QUEUE_FIFO);
    ensure!(checker.is_some_and(|a| a.passed), "checker {checker:?}");
    Ok(format!("bay order {:?}", r.bay_order))
}

fn occupancy_fidelity() -> Outcome {
    let s = scenario("three_host");
    ensure!(s.detector.p_miss.values().all(|&p| p == 0.0), "p_miss not zero");
    ensure!(s.detector.pos_noise_sigma_m == 0.0, "noise not zero");
    let map = s.load_map().map_err(|e| e.to_string())?;
    let out = run_sim(&s).map_err(|e| e.to_string())?;
    let mut poses_by_seq: BTreeMap<u64, Vec<PoseRecord>> = BTreeMap::new();
    let (mut frames, mut nonempty) = (0, 0);
    for e in &out.tap {
        let env = &e.envelope;
        if env.key == topics::POSES && env.sender_id == topics::WORLD_ID {
            poses_by_seq.insert(
                env.seq,
                serde_json::from_value(env.payload.clone()).map_err(|e| e.to_string())?,
            );
        } else if env.key == topics::OCCUPANCY && env.sender_id == topics::RSU_ID {
            let frame: OccupancyMsg = serde_json::from_value(env.payload.clone()).map_err(|e| e.to_string())?;
            let poses = poses_by_seq
                .get(&frame.pose_seq)
                .ok_or(format!("frame {} has no pose snapshot", frame.frame_seq))?;
            let expected = truth(poses, &map, s.theta);
            let got: BTreeSet<u32> = frame.occupied.iter().copied().collect();
            ensure!(got == expected, "frame {}: {got:?} vs {expected:?}", frame.frame_seq);
            frames += 1;
            nonempty += !got.is_empty() as usize;
        }
    }
    ensure!(frames > 100 && nonempty > 10, "{frames} frames, {nonempty} non-empty");
    Ok(format!(
        "{frames}/{frames} frames equal the ground truth ({nonempty} non-empty)"
    ))
}

fn geometry_oracle() -> Outcome {
    let mut worst_closed = 0.0f64;
    for half in [0.5, 1.0, 1.3, 2.25, 7.0] {
        let side: f64 = 2.0 * half;
        let expected = 2.0 * side * side * (2f64.sqrt() - 1.0);
        let a = OrientedRect::new(3.0, -1.0, half, half, 0.0);
        let b = OrientedRect::new(3.0, -1.0, half, half, FRAC_PI_4);
        worst_closed = worst_closed.max((oriented_rect_overlap(&a, &b).area - expected).abs());
    }
    ensure!(worst_closed < 1e-6, "45 degree case off by {worst_closed:e}");

    const PAIRS: u64 = 200;
    const SAMPLES: usize = 1_000_000;
    let errors: Vec<f64> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..PAIRS)
            .map(|i| {
                s.spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(7000 + i);
                    let mut rect = || {
                        OrientedRect::new(
                            rng.gen_range(-0.6..0.6),
                            rng.gen_range(-0.6..0.6),
                            rng.gen_range(0.1..0.5),
                            rng.gen_range(0.1..0.5),
                            rng.gen_range(-PI..PI),
                        )
                    };
                    let (a, b) = (rect(), rect());
                    let exact = oriented_rect_overlap(&a, &b).area;
                    (exact - monte_carlo_overlap(&a, &b, SAMPLES, &mut rng)).abs()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let worst = errors.iter().copied().fold(0.0, f64::max);
    ensure!(worst <= 3e-3, "Monte Carlo error {worst:e}");
    Ok(format!(
        "closed form within {worst_closed:.1e}, Monte Carlo worst {worst:.1e} over {PAIRS} pairs"
    ))
}

fn rtt() -> Outcome {
    let r = Router::bind("127.0.0.1:0", RouterConfig::default())
        .map_err(|e| e.to_string())?
        .spawn();
    let responder = Arc::new(Session::connect(r.addr(), "managers").map_err(|e| e.to_string())?);
    spawn_echo_responder(Arc::clone(&responder), "managers", Duration::ZERO).map_err(|e| e.to_string())?;
    let prober = Session::connect(r.addr(), "v1").map_err(|e| e.to_string())?;
    let stats = rtt_probe(&prober, "managers", 2019, Duration::from_millis(1)).map_err(|e| e.to_string())?;
    ensure!(stats.samples == 2019, "{stats}");
    ensure!(
        stats.mean_ms < 5.0 && stats.std_ms >= 0.0 && stats.max_ms >= stats.mean_ms,
        "{stats}"
    );
    Ok(format!("{stats}"))
}

fn determinism() -> Outcome {
    let names = ["two_host", "three_host", "queue_fifo", "eviction"];
    for name in names {
        let s = scenario(name);
        let a = run_sim(&s).map_err(|e| e.to_string())?.report;
        let b = run_sim(&s).map_err(|e| e.to_string())?.report;
        ensure!(
            !a.transitions.is_empty() && !a.reservations.is_empty(),
            "{name}: empty logs"
        );
        ensure!(a.stripped_logs() == b.stripped_logs(), "{name}: logs differ");
    }
    Ok(format!("identical logs on repeat for {names:?}"))
}

fn totality() -> Outcome {
    let mut pairs = 0;
    let mut edges_seen = vec![false; TABLE.len()];
    for phase in S::ALL {
        for ev in EVENTS {
            for c in contexts() {
                let (st, now) = fixture(phase, c);
                let first = transition(&st, &event(ev), now);
                let again = transition(&st, &event(ev), now);
                ensure!(first == again, "{phase} x {ev:?}: repeat call differs");
                let (next, actions) = first;
                match expected(phase, ev, c) {
                    Some(row) => {
                        edges_seen[TABLE.iter().position(|r| std::ptr::eq(r, row)).unwrap()] = true;
                        ensure!(
                            next.phase == row.to && tags(&actions) == row.actions,
                            "{phase} x {ev:?} {c:?}: {} {actions:?}",
                            next.phase
                        );
                    }
                    None => ensure!(next == st && actions.is_empty(), "{phase} x {ev:?} {c:?}: not a no-op"),
                }
                pairs += 1;
            }
        }
    }
    ensure!(edges_seen.iter().all(|&s| s), "some table rows never exercised");
    Ok(format!(
        "{} states x {} events x {} contexts = {pairs} cases, all edges or no-ops",
        S::ALL.len(),
        EVENTS.len(),
        contexts().len()
    ))
}

fn eviction() -> Outcome {
    let s = scenario("eviction");
    let victim = s.faults.first().ok_or("scenario has no fault")?.kill_ns.clone();
    let (r, tap) = live("eviction")?;
    let bad = failed_assertions(&r);
    ensure!(bad.is_empty(), "{bad:?}");
    let at = |key: &str| {
        tap.iter()
            .filter(|e| e.envelope.key == key)
            .map(|e| (e.recv_ns, e.envelope.payload.clone()))
            .collect::<Vec<_>>()
    };
    let killed = at(KILLED_KEY);
    let evicted = at(topics::COORD_EVICTED);
    ensure!(
        killed.len() == 1 && evicted.len() == 1,
        "{} kills, {} evictions",
        killed.len(),
        evicted.len()
    );
    let msg: EvictedMsg = serde_json::from_value(evicted[0].1.clone()).map_err(|e| e.to_string())?;
    ensure!(msg.ns == victim, "evicted {}", msg.ns);
    let bound = DEFAULT_HEARTBEAT_TIMEOUT_NS + MANAGER_TICK_NS;
    let latency = evicted[0].0 - killed[0].0;
    ensure!(latency <= bound, "evicted {:.3} s after the kill", latency as f64 / 1e9);

    let pos = r
        .enqueue_order
        .iter()
        .position(|n| *n == victim)
        .ok_or("victim never queued")?;
    let next = r.enqueue_order.get(pos + 1).ok_or("nobody queued behind the victim")?;
    let grants = at(&topics::ns_key(next, topics::leaf::BAY_GRANT));
    let advanced = grants
        .iter()
        .find(|(t, _)| *t >= killed[0].0)
        .ok_or(format!("{next} never got the bay"))?;
    ensure!(
        advanced.0 - killed[0].0 <= bound,
        "queue moved {:.3} s after the kill",
        (advanced.0 - killed[0].0) as f64 / 1e9
    );
    if let Some(spot) = msg.released_spot {
        let released = r
            .reservations
            .iter()
            .any(|e| e.ns == victim && e.spot_id == spot && e.action == ReservationAction::Release);
        ensure!(released, "spot {spot} not released");
    }
    for v in s.vehicles.iter().filter(|v| v.ns != victim) {
        ensure!(
            r.final_states.get(&v.ns) == Some(&S::Parked),
            "{} ended {:?}",
            v.ns,
            r.final_states.get(&v.ns)
        );
    }
    Ok(format!(
        "{victim} evicted {:.3} s after the kill, {next} got the bay {:.3} s after, the rest parked",
        latency as f64 / 1e9,
        (advanced.0 - killed[0].0) as f64 / 1e9
    ))
}
