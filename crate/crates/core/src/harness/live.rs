//! Multi-process runs: one OS process per component, talking through a
//! router that may be local or on another machine.

use std::io::{BufRead, BufReader};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use anyhow::{bail, Context};
use avp_msgbus::rtt::rtt_probe_samples;
use avp_msgbus::{ProbeOptions, RttStats, Session};
use tracing::{info, warn};

use crate::coordination::DEFAULT_HEARTBEAT_TIMEOUT_NS;
use crate::harness::operator::{Operator, OperatorShared, KILLED_KEY};
use crate::harness::report::{HostInfo, RunReport, TAP_FILE};
use crate::harness::scenario::{Scenario, StopWhen};
use crate::harness::tap::LiveTap;
use crate::harness::{evaluate, launch_order};
use crate::perception::DEFAULT_RATE_HZ;
use crate::runtime::{run_live, spawn_live, Component};
use crate::topics::{self, ns_key, ready_key};
use crate::world::DEFAULT_TICK_S;
use clap::ValueEnum;

pub const READY_TIMEOUT: Duration = Duration::from_secs(10);
const POLL: Duration = Duration::from_millis(100);
/// Time allowed for in-flight messages to reach the tap before it closes.
const DRAIN: Duration = Duration::from_millis(500);

pub const HARNESS_ID: &str = "harness";

#[derive(Debug, Clone)]
pub struct LiveOptions {
    /// Binary providing the component subcommands.
    pub exe: PathBuf,
    /// Existing router; when absent a local one is started as a child.
    pub router: Option<SocketAddr>,
    pub out_dir: PathBuf,
}

struct Children {
    procs: Vec<(String, Child)>,
}

impl Children {
    fn kill(&mut self, name: &str) -> bool {
        let Some(i) = self.procs.iter().position(|(n, _)| n == name) else {
            return false;
        };
        let (_, mut child) = self.procs.remove(i);
        let _ = child.kill();
        let _ = child.wait();
        true
    }

    fn kill_all(&mut self) {
        while let Some((_, mut child)) = self.procs.pop() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl Drop for Children {
    fn drop(&mut self) {
        self.kill_all();
    }
}

/// Starts `avp router` on an ephemeral port and reads back its address.
pub fn spawn_router(exe: &Path, listen: &str) -> anyhow::Result<(Child, SocketAddr)> {
    let mut child = Command::new(exe)
        .args(["router", "--listen", listen])
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .with_context(|| format!("starting router from {}", exe.display()))?;
    let stdout = child.stdout.take().context("router stdout")?;
    let mut line = String::new();
    BufReader::new(stdout).read_line(&mut line)?;
    match line.trim().parse() {
        Ok(addr) => Ok((child, addr)),
        Err(_) => {
            let _ = child.kill();
            bail!("router printed {line:?} instead of its address")
        }
    }
}

fn wait_ready(tap: &LiveTap, name: &str, timeout: Duration) -> bool {
    let key = ready_key(name);
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if tap.with_entries(|es| es.iter().any(|e| e.envelope.key == key)) {
            return true;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    false
}

pub fn run_live_scenario(scenario_path: &Path, opts: &LiveOptions) -> anyhow::Result<RunReport> {
    let scenario = Scenario::load(scenario_path)?;
    let map = scenario.load_map()?;
    scenario.validate(&map)?;
    std::fs::create_dir_all(&opts.out_dir)?;

    let mut router_child = None;
    let addr = match opts.router {
        Some(a) => a,
        None => {
            let (child, addr) = spawn_router(&opts.exe, "127.0.0.1:0")?;
            router_child = Some(child);
            addr
        }
    };
    info!(%addr, scenario = %scenario.name, "live run");

    let session = Arc::new(Session::connect(addr, HARNESS_ID)?);
    let tap = LiveTap::start(Arc::clone(&session), Some(&opts.out_dir.join(TAP_FILE)))?;
    let mut children = Children { procs: Vec::new() };
    let mut aborted = None;

    for name in launch_order(&scenario) {
        let mut cmd = Command::new(&opts.exe);
        cmd.args(component_args(&scenario, &name, addr)).stdin(Stdio::null());
        let child = cmd.spawn().with_context(|| format!("starting {name}"))?;
        children.procs.push((name.clone(), child));
        if !wait_ready(&tap, &name, READY_TIMEOUT) {
            warn!(component = %name, "readiness timeout");
            aborted = Some(format!("{name} not ready within {} s", READY_TIMEOUT.as_secs()));
            break;
        }
    }

    if aborted.is_none() {
        let shared = Arc::new(Mutex::new(OperatorShared::default()));
        let stop = Arc::new(AtomicBool::new(false));
        let op = spawn_live(
            Box::new(Operator::new(&scenario, Arc::clone(&shared))),
            addr,
            Arc::clone(&stop),
        )?;
        let deadline = Instant::now() + Duration::from_secs_f64(scenario.duration_s);
        loop {
            std::thread::sleep(POLL);
            let (kills, done) = {
                let mut s = shared.lock().unwrap();
                (std::mem::take(&mut s.kills), s.done)
            };
            for ns in kills {
                info!(%ns, "killing vehicle process");
                if children.kill(&ns) {
                    session.publish(KILLED_KEY, serde_json::json!({"ns": ns}))?;
                }
            }
            if done {
                break;
            }
            if Instant::now() >= deadline {
                if scenario.stop_when != StopWhen::Duration {
                    warn!("stop condition not reached before duration_s");
                    aborted = Some(format!("stop condition not reached within {} s", scenario.duration_s));
                }
                break;
            }
        }
        stop.store(true, Ordering::Relaxed);
        match op.join() {
            Ok(Ok(())) => {}
            Ok(Err(e)) => warn!(error = %e, "operator stopped with error"),
            Err(_) => warn!("operator thread panicked"),
        }
    }

    std::thread::sleep(DRAIN);
    children.kill_all();
    let entries = tap.finish()?;
    session.close();
    if let Some(mut r) = router_child {
        let _ = r.kill();
        let _ = r.wait();
    }

    let mut report = evaluate(&scenario, &map, "live", &entries);
    report.host = HostInfo::collect();
    report.aborted = aborted;
    report.save(&opts.out_dir)?;
    Ok(report)
}

/// Command line for one component process, derived from the scenario.
pub fn component_args(scenario: &Scenario, name: &str, router: SocketAddr) -> Vec<String> {
    let map = scenario.map_file.to_string_lossy().into_owned();
    let mut args: Vec<String> = match name {
        topics::WORLD_ID => vec![
            "world".into(),
            "--tick-ms".into(),
            format!("{}", DEFAULT_TICK_S * 1e3),
            "--seed".into(),
            scenario.seed.to_string(),
        ],
        topics::RSU_ID => {
            let d = &scenario.detector;
            let mut a = vec![
                "rsu".into(),
                "--rate-hz".into(),
                DEFAULT_RATE_HZ.to_string(),
                "--sigma-m".into(),
                d.pos_noise_sigma_m.to_string(),
                "--seed".into(),
                d.seed.to_string(),
                "--theta".into(),
                scenario.theta.to_string(),
            ];
            if !d.p_miss.is_empty() {
                let spec: Vec<String> = d.p_miss.iter().map(|(c, p)| format!("{c}={p}")).collect();
                a.extend(["--p-miss".into(), spec.join(",")]);
            }
            a
        }
        topics::MANAGERS_ID => vec![
            "managers".into(),
            "--policy".into(),
            scenario
                .policy
                .to_possible_value()
                .expect("policy has a name")
                .get_name()
                .to_string(),
            "--heartbeat-timeout-s".into(),
            (DEFAULT_HEARTBEAT_TIMEOUT_NS as f64 / 1e9).to_string(),
        ],
        ns => {
            let spec = scenario
                .vehicles
                .iter()
                .find(|v| v.ns == ns)
                .expect("vehicle in scenario");
            vec![
                "vehicle".into(),
                "--ns".into(),
                ns.into(),
                "--spawn-index".into(),
                spec.spawn_index.to_string(),
                "--class".into(),
                spec.class_label.clone(),
            ]
        }
    };
    args.extend(["--router".into(), router.to_string(), "--map".into(), map]);
    args
}

/// Runs one component on the current thread until it finishes or the
/// router goes away.
pub fn serve_component(mut comp: Box<dyn Component>, session: &Session) -> anyhow::Result<()> {
    let stop = AtomicBool::new(false);
    run_live(comp.as_mut(), session, &stop)?;
    Ok(())
}

/// Background prober used by vehicle processes: pings `peer` in batches
/// and republishes the cumulative statistics on `avp/<ns>/rtt`.
pub fn spawn_rtt_reporter(session: Arc<Session>, peer: &str, interval: Duration) -> std::thread::JoinHandle<()> {
    let peer = peer.to_string();
    std::thread::spawn(move || {
        let key = ns_key(session.id(), topics::leaf::RTT);
        let opts = ProbeOptions {
            grace: Duration::from_millis(500),
        };
        let mut samples = Vec::new();
        while !session.is_closed() {
            match rtt_probe_samples(&session, &peer, 10, interval, &opts) {
                Ok(batch) => samples.extend(batch),
                Err(_) => break,
            }
            if let Some(stats) = RttStats::from_samples(&samples) {
                if session.publish(&key, serde_json::to_value(stats).unwrap()).is_err() {
                    break;
                }
            }
        }
    })
}
