//! Run reports, assembled after the fact from a bus recording.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use avp_msgbus::RttStats;
use serde::{Deserialize, Serialize};

use crate::harness::assertions::AssertionResult;
use crate::harness::tap::TapEntry;
use crate::node::LifecycleState;
use crate::topics::{self, leaf, split_ns_key, Reply, ReservedEntry, StatusMsg};
use crate::world::SpotId;

pub const REPORT_FILE: &str = "report.json";
pub const TAP_FILE: &str = "tap.ndjson";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub t_ns: i64,
    pub ns: String,
    pub seq: u64,
    pub state: LifecycleState,
    pub failed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReservationAction {
    Grant,
    Release,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReservationEvent {
    pub t_ns: i64,
    pub action: ReservationAction,
    pub spot_id: SpotId,
    pub ns: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HostInfo {
    pub hostname: String,
    pub cpus: usize,
    /// Resident set size of the harness process at report time, if known.
    pub rss_kib: Option<u64>,
    pub load_avg_1m: Option<f64>,
}

impl HostInfo {
    pub fn collect() -> Self {
        let read = |p: &str| std::fs::read_to_string(p).ok();
        Self {
            hostname: read("/proc/sys/kernel/hostname")
                .map(|s| s.trim().to_string())
                .unwrap_or_default(),
            cpus: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            rss_kib: read("/proc/self/status").and_then(|s| {
                s.lines()
                    .find_map(|l| l.strip_prefix("VmRSS:"))
                    .and_then(|v| v.split_whitespace().next()?.parse().ok())
            }),
            load_avg_1m: read("/proc/loadavg").and_then(|s| s.split_whitespace().next()?.parse().ok()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub mode: String,
    pub seed: u64,
    pub duration_s: f64,
    pub transitions: Vec<TransitionRecord>,
    pub reservations: Vec<ReservationEvent>,
    pub collisions: usize,
    /// Keyed by "<vehicle>-><peer>".
    pub rtt: BTreeMap<String, RttStats>,
    pub assertion_results: Vec<AssertionResult>,
    pub final_states: BTreeMap<String, LifecycleState>,
    pub enqueue_order: Vec<String>,
    pub bay_order: Vec<String>,
    #[serde(default)]
    pub host: HostInfo,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
}

impl RunReport {
    /// Everything that can be read off the tap; assertions are filled in by
    /// the caller.
    pub fn from_tap(scenario: &str, mode: &str, seed: u64, tap: &[TapEntry]) -> Self {
        let mut transitions = Vec::new();
        let mut final_states = BTreeMap::new();
        let mut rtt = BTreeMap::new();
        let mut enqueue_order = Vec::new();
        let mut bay_order = Vec::new();
        let mut collisions = 0;
        let mut reservations = Vec::new();
        let mut held: BTreeMap<SpotId, String> = BTreeMap::new();
        let (mut first, mut last) = (None, 0i64);

        for e in tap {
            let env = &e.envelope;
            first.get_or_insert(env.timestamp_ns);
            last = last.max(env.timestamp_ns);
            if env.key == topics::COLLISION {
                collisions += 1;
                continue;
            }
            let from_managers = env.sender_id == topics::MANAGERS_ID;
            if env.key == topics::COORD_RESERVED && from_managers {
                let Ok(table) = serde_json::from_value::<Vec<ReservedEntry>>(env.payload.clone()) else {
                    continue;
                };
                let now: BTreeMap<SpotId, String> = table.into_iter().map(|r| (r.spot_id, r.ns)).collect();
                for (spot, ns) in &held {
                    if now.get(spot) != Some(ns) {
                        reservations.push(ReservationEvent {
                            t_ns: env.timestamp_ns,
                            action: ReservationAction::Release,
                            spot_id: *spot,
                            ns: ns.clone(),
                        });
                    }
                }
                for (spot, ns) in &now {
                    if held.get(spot) != Some(ns) {
                        reservations.push(ReservationEvent {
                            t_ns: env.timestamp_ns,
                            action: ReservationAction::Grant,
                            spot_id: *spot,
                            ns: ns.clone(),
                        });
                    }
                }
                held = now;
                continue;
            }
            let Some((ns, leaf_name)) = split_ns_key(&env.key) else {
                continue;
            };
            match leaf_name {
                leaf::STATUS if env.sender_id == ns => {
                    if let Ok(s) = serde_json::from_value::<StatusMsg>(env.payload.clone()) {
                        final_states.insert(ns.to_string(), s.state);
                        transitions.push(TransitionRecord {
                            t_ns: env.timestamp_ns,
                            ns: ns.to_string(),
                            seq: s.seq,
                            state: s.state,
                            failed: s.failed,
                        });
                    }
                }
                leaf::RTT if env.sender_id == ns => {
                    if let Ok(r) = serde_json::from_value::<RttStats>(env.payload.clone()) {
                        rtt.insert(format!("{ns}->{}", topics::MANAGERS_ID), r);
                    }
                }
                leaf::QUEUE_REPLY if from_managers => {
                    if serde_json::from_value::<Reply>(env.payload.clone()).is_ok_and(|r| r.ok) {
                        enqueue_order.push(ns.to_string());
                    }
                }
                leaf::BAY_GRANT if from_managers => bay_order.push(ns.to_string()),
                _ => {}
            }
        }

        Self {
            scenario: scenario.to_string(),
            mode: mode.to_string(),
            seed,
            duration_s: first.map(|f| (last - f) as f64 / 1e9).unwrap_or(0.0),
            transitions,
            reservations,
            collisions,
            rtt,
            assertion_results: Vec::new(),
            final_states,
            enqueue_order,
            bay_order,
            host: HostInfo::default(),
            aborted: None,
        }
    }

    pub fn all_passed(&self) -> bool {
        self.aborted.is_none() && self.assertion_results.iter().all(|a| a.passed)
    }

    /// Transition and reservation logs with timestamps removed, for
    /// comparing runs.
    pub fn stripped_logs(&self) -> String {
        let mut s = String::new();
        for t in &self.transitions {
            let _ = writeln!(s, "transition {} {} {} {}", t.ns, t.seq, t.state, t.failed);
        }
        for r in &self.reservations {
            let _ = writeln!(s, "reservation {:?} {} {}", r.action, r.spot_id, r.ns);
        }
        s
    }

    /// States each vehicle passed through, in order.
    pub fn states_of(&self, ns: &str) -> Vec<LifecycleState> {
        self.transitions
            .iter()
            .filter(|t| t.ns == ns)
            .map(|t| t.state)
            .collect()
    }

    pub fn save(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join(REPORT_FILE), text + "\n")
    }

    pub fn load(dir: &Path) -> anyhow::Result<Self> {
        let path = if dir.is_dir() {
            dir.join(REPORT_FILE)
        } else {
            dir.to_path_buf()
        };
        let text = std::fs::read_to_string(&path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum CsvTable {
    #[default]
    Transitions,
    Reservations,
    Rtt,
    Assertions,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn to_csv(report: &RunReport, table: CsvTable) -> String {
    let mut s = String::new();
    match table {
        CsvTable::Transitions => {
            s.push_str("t_ns,ns,seq,state,failed\n");
            for t in &report.transitions {
                let _ = writeln!(s, "{},{},{},{},{}", t.t_ns, csv_field(&t.ns), t.seq, t.state, t.failed);
            }
        }
        CsvTable::Reservations => {
            s.push_str("t_ns,action,spot_id,ns\n");
            for r in &report.reservations {
                let action = match r.action {
                    ReservationAction::Grant => "grant",
                    ReservationAction::Release => "release",
                };
                let _ = writeln!(s, "{},{action},{},{}", r.t_ns, r.spot_id, csv_field(&r.ns));
            }
        }
        CsvTable::Rtt => {
            s.push_str("pair,rtt_ms,std_ms,max_rtt_ms,samples\n");
            for (pair, r) in &report.rtt {
                let _ = writeln!(
                    s,
                    "{},{:.2},{:.2},{:.2},{}",
                    csv_field(pair),
                    r.mean_ms,
                    r.std_ms,
                    r.max_ms,
                    r.samples
                );
            }
        }
        CsvTable::Assertions => {
            s.push_str("name,passed,detail\n");
            for a in &report.assertion_results {
                let _ = writeln!(s, "{},{},{}", csv_field(&a.name), a.passed, csv_field(&a.detail));
            }
        }
    }
    s
}
