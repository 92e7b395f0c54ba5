//! Command line for the `avp` binary and the single-purpose component
//! binaries.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use avp_msgbus::{rtt_probe_with, spawn_echo_responder, ProbeOptions, Router, RouterConfig, Session};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use tracing::info;

use crate::coordination::{AllocationPolicy, Managers, ManagersConfig};
use crate::geometry::Pose2;
use crate::harness::gateway::{parse_listen, Gateway};
use crate::harness::live::{run_live_scenario, serve_component, spawn_rtt_reporter, LiveOptions, HARNESS_ID};
use crate::harness::report::{to_csv, CsvTable, RunReport, TAP_FILE};
use crate::harness::sim::run_sim;
use crate::harness::tap::{read_tap, write_tap, LiveTap};
use crate::harness::{assert_suite, Scenario, SuiteContext};
use crate::node::{NodeConfig, VehicleNode};
use crate::perception::{DetectorModel, RsuComponent, RsuConfig, DEFAULT_RATE_HZ, DEFAULT_THETA};
use crate::topics;
use crate::world::{LotMap, WorldComponent, WorldConfig, DEFAULT_CLASS};

#[derive(Debug, Parser)]
#[command(name = "avp", version, about = "Distributed autonomous valet parking simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the message router.
    Router(RouterArgs),
    /// Measure round-trip time to a peer.
    Probe(ProbeArgs),
    /// Answer RTT probes addressed to an id.
    Echo(EchoArgs),
    /// Run the lot simulation.
    World(WorldArgs),
    /// Run the roadside occupancy detector.
    Rsu(RsuArgs),
    /// Run the coordination managers.
    Managers(ManagersArgs),
    /// Run one vehicle node.
    Vehicle(VehicleArgs),
    /// Run a scenario and write tap.ndjson and report.json.
    Run(RunArgs),
    /// Check a recorded tap.
    Assert(AssertArgs),
    /// Print a saved report.
    Report(ReportArgs),
    /// Websocket bridge for the operator panel.
    Gateway(GatewayArgs),
    /// Record all bus traffic to NDJSON.
    Tap(TapArgs),
}

#[derive(Debug, Args)]
pub struct RouterArgs {
    #[arg(long, default_value = "127.0.0.1:7447")]
    pub listen: String,
    #[arg(long, default_value_t = avp_msgbus::DEFAULT_MAX_FRAME_BYTES)]
    pub max_frame_bytes: usize,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub router: SocketAddr,
    #[arg(long)]
    pub peer: String,
    #[arg(long, default_value_t = 100)]
    pub count: u32,
    #[arg(long, default_value_t = 10)]
    pub interval_ms: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Client id of the prober.
    #[arg(long, default_value = "probe")]
    pub id: String,
}

#[derive(Debug, Args)]
pub struct EchoArgs {
    #[arg(long)]
    pub router: SocketAddr,
    #[arg(long)]
    pub peer: String,
}

#[derive(Debug, Args)]
pub struct WorldArgs {
    #[arg(long)]
    pub router: SocketAddr,
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long, default_value_t = 50.0)]
    pub tick_ms: f64,
    /// Accepted for symmetry with the other components; the simulation has
    /// no random elements.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct RsuArgs {
    #[arg(long)]
    pub router: SocketAddr,
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long, default_value_t = DEFAULT_RATE_HZ)]
    pub rate_hz: f64,
    /// Per-class miss probabilities, e.g. `sedan=0.1,van=0.3`.
    #[arg(long)]
    pub p_miss: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    pub sigma_m: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_THETA)]
    pub theta: f64,
}

#[derive(Debug, Args)]
pub struct ManagersArgs {
    #[arg(long)]
    pub router: SocketAddr,
    #[arg(long, value_enum, default_value_t = AllocationPolicy::LowestId)]
    pub policy: AllocationPolicy,
    #[arg(long, default_value_t = 5.0)]
    pub heartbeat_timeout_s: f64,
    /// Needed by the nearest policy.
    #[arg(long)]
    pub map: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VehicleArgs {
    #[arg(long)]
    pub router: SocketAddr,
    #[arg(long)]
    pub ns: String,
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long)]
    pub spawn_index: usize,
    #[arg(long, default_value = DEFAULT_CLASS)]
    pub class: String,
    /// Do not probe RTT to the managers.
    #[arg(long)]
    pub no_rtt: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// One process per component over a real router.
    Live,
    /// Single process, virtual time.
    Sim,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Live)]
    pub mode: Mode,
    /// Use an existing router instead of starting one.
    #[arg(long)]
    pub router: Option<SocketAddr>,
    /// Override the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AssertArgs {
    #[arg(long)]
    pub tap: PathBuf,
    /// Map whose spot ids every occupancy frame must cover.
    #[arg(long)]
    pub map: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run output directory or report file.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[arg(long, value_enum, default_value_t = CsvTable::Transitions)]
    pub table: CsvTable,
}

#[derive(Debug, Args)]
pub struct GatewayArgs {
    #[arg(long)]
    pub router: SocketAddr,
    #[arg(long, default_value = ":8080")]
    pub listen: String,
}

#[derive(Debug, Args)]
pub struct TapArgs {
    #[arg(long)]
    pub router: SocketAddr,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn init_tracing() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn"));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

/// Entry point for the single-purpose binaries: `router --listen ...` is
/// `avp router --listen ...`.
pub fn main_as(subcommand: &str) -> ExitCode {
    let mut args: Vec<std::ffi::OsString> = std::env::args_os().collect();
    args.insert(1, subcommand.into());
    main_from(args)
}

pub fn main_from(args: Vec<std::ffi::OsString>) -> ExitCode {
    init_tracing();
    let cli = Cli::parse_from(args);
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_map(path: &PathBuf) -> anyhow::Result<Arc<LotMap>> {
    Ok(Arc::new(
        LotMap::load(path).with_context(|| format!("loading map {}", path.display()))?,
    ))
}

fn connect(router: SocketAddr, id: &str) -> anyhow::Result<Session> {
    Session::connect(router, id).with_context(|| format!("connecting to router {router} as {id}"))
}

pub fn dispatch(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Router(a) => {
            let router = Router::bind(
                &a.listen,
                RouterConfig {
                    max_frame_bytes: a.max_frame_bytes,
                    ..RouterConfig::default()
                },
            )
            .with_context(|| format!("binding {}", a.listen))?;
            println!("{}", router.local_addr());
            router.run()?;
        }
        Command::Probe(a) => {
            let session = connect(a.router, &a.id)?;
            let opts = ProbeOptions::default();
            let stats = rtt_probe_with(&session, &a.peer, a.count, Duration::from_millis(a.interval_ms), &opts)?;
            println!("RTT (ms) | Max RTT (ms) | Samples");
            println!("{stats}");
            if let Some(out) = a.out {
                let doc = json!({"peer": a.peer, "sent": a.count, "stats": stats});
                std::fs::write(&out, serde_json::to_string_pretty(&doc)? + "\n")?;
            }
            session.close();
        }
        Command::Echo(a) => {
            let session = Arc::new(connect(a.router, &format!("echo-{}", a.peer))?);
            let handle = spawn_echo_responder(session, &a.peer, Duration::ZERO)?;
            let _ = handle.join();
        }
        Command::World(a) => {
            let map = load_map(&a.map)?;
            let comp = WorldComponent::new(WorldConfig {
                tick_s: a.tick_ms / 1e3,
                map: Some(map),
            })?;
            let session = connect(a.router, topics::WORLD_ID)?;
            serve_component(Box::new(comp), &session)?;
        }
        Command::Rsu(a) => {
            let map = load_map(&a.map)?;
            let model = DetectorModel {
                p_miss: a
                    .p_miss
                    .as_deref()
                    .map(DetectorModel::parse_p_miss)
                    .transpose()?
                    .unwrap_or_default(),
                pos_noise_sigma_m: a.sigma_m,
                seed: a.seed,
            };
            let comp = RsuComponent::new(
                map,
                RsuConfig {
                    rate_hz: a.rate_hz,
                    theta: a.theta,
                    model,
                },
            )?;
            let session = connect(a.router, topics::RSU_ID)?;
            serve_component(Box::new(comp), &session)?;
        }
        Command::Managers(a) => {
            if !(a.heartbeat_timeout_s.is_finite() && a.heartbeat_timeout_s > 0.0) {
                bail!("--heartbeat-timeout-s must be positive");
            }
            let map = a.map.as_ref().map(load_map).transpose()?;
            if a.policy == AllocationPolicy::Nearest && map.is_none() {
                bail!("--policy nearest needs --map");
            }
            let comp = Managers::new(ManagersConfig {
                policy: a.policy,
                heartbeat_timeout_ns: (a.heartbeat_timeout_s * 1e9) as i64,
                map,
            });
            let session = Arc::new(connect(a.router, topics::MANAGERS_ID)?);
            spawn_echo_responder(Arc::clone(&session), topics::MANAGERS_ID, Duration::ZERO)?;
            serve_component(Box::new(comp), &session)?;
        }
        Command::Vehicle(a) => {
            topics::validate_ns(&a.ns).map_err(anyhow::Error::msg)?;
            let map = load_map(&a.map)?;
            let pose: Pose2 = *map
                .spawn_points
                .get(a.spawn_index)
                .with_context(|| format!("map has no spawn point {}", a.spawn_index))?;
            let mut config = NodeConfig::new(a.ns.clone(), pose);
            config.class = a.class;
            let node = VehicleNode::new(config, map);
            let session = Arc::new(connect(a.router, &a.ns)?);
            if !a.no_rtt {
                spawn_rtt_reporter(Arc::clone(&session), topics::MANAGERS_ID, Duration::from_millis(100));
            }
            serve_component(Box::new(node), &session)?;
            session.close();
        }
        Command::Run(a) => {
            let report = match a.mode {
                Mode::Sim => {
                    let mut scenario = Scenario::load(&a.scenario)?;
                    if let Some(seed) = a.seed {
                        scenario.seed = seed;
                    }
                    let outcome = run_sim(&scenario)?;
                    std::fs::create_dir_all(&a.out)?;
                    write_tap(a.out.join(TAP_FILE), &outcome.tap)?;
                    outcome.report.save(&a.out)?;
                    outcome.report
                }
                Mode::Live => {
                    if a.seed.is_some() {
                        bail!("--seed is only supported with --mode sim; set it in the scenario file");
                    }
                    let exe = std::env::current_exe()?;
                    let exe = live_exe(exe);
                    run_live_scenario(
                        &a.scenario,
                        &LiveOptions {
                            exe,
                            router: a.router,
                            out_dir: a.out.clone(),
                        },
                    )?
                }
            };
            print_summary(&report);
            info!(out = %a.out.display(), "run written");
            return Ok(if report.all_passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            });
        }
        Command::Assert(a) => {
            let tap = read_tap(&a.tap).with_context(|| format!("reading {}", a.tap.display()))?;
            let ctx = SuiteContext {
                spot_ids: a
                    .map
                    .as_ref()
                    .map(load_map)
                    .transpose()?
                    .map(|m| m.spot_ids().collect()),
                launch_order: default_launch_order(&tap),
            };
            let results = assert_suite(&tap, &ctx);
            for r in &results {
                println!("{r}");
            }
            return Ok(if results.iter().all(|r| r.passed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            });
        }
        Command::Report(a) => {
            let report = RunReport::load(&a.input)?;
            match a.format {
                Format::Json => println!("{}", serde_json::to_string_pretty(&report)?),
                Format::Csv => print!("{}", to_csv(&report, a.table)),
            }
        }
        Command::Gateway(a) => {
            Gateway::bind(a.router, parse_listen(&a.listen)?)?.run()?;
        }
        Command::Tap(a) => {
            let session = Arc::new(connect(a.router, &format!("{HARNESS_ID}-tap"))?);
            let tap = LiveTap::start(Arc::clone(&session), Some(&a.out))?;
            while !session.is_closed() {
                std::thread::sleep(Duration::from_millis(200));
            }
            tap.finish()?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Single-purpose binaries live next to `avp`; children are always started
/// through `avp` itself.
fn live_exe(current: PathBuf) -> PathBuf {
    let sibling = current.with_file_name(format!("avp{}", std::env::consts::EXE_SUFFIX));
    if sibling.exists() {
        sibling
    } else {
        current
    }
}

/// Without a scenario, the expected order is infrastructure then every
/// vehicle that announced itself.
fn default_launch_order(tap: &[crate::harness::TapEntry]) -> Vec<String> {
    let prefix = format!("{}/", topics::READY_PREFIX);
    let mut order: Vec<String> = [topics::WORLD_ID, topics::RSU_ID, topics::MANAGERS_ID]
        .into_iter()
        .filter(|n| tap.iter().any(|e| e.envelope.key == format!("{prefix}{n}")))
        .map(String::from)
        .collect();
    for e in tap {
        if let Some(name) = e.envelope.key.strip_prefix(&prefix) {
            if topics::validate_ns(name).is_ok() && !order.iter().any(|n| n == name) {
                order.push(name.to_string());
            }
        }
    }
    order
}

fn print_summary(report: &RunReport) {
    println!("scenario {} ({}, seed {})", report.scenario, report.mode, report.seed);
    if let Some(why) = &report.aborted {
        println!("aborted: {why}");
    }
    for (ns, state) in &report.final_states {
        println!("  {ns}: {state}");
    }
    println!("collisions: {}", report.collisions);
    if !report.rtt.is_empty() {
        println!("RTT (ms) | Max RTT (ms) | Samples");
        for (pair, s) in &report.rtt {
            println!("  {pair}: {s}");
        }
    }
    for r in &report.assertion_results {
        println!("{r}");
    }
}
