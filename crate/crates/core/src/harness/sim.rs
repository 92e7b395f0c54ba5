//! Whole scenarios in virtual time, reproducible from the seed.

use std::sync::{Arc, Mutex};

use serde_json::json;
use tracing::info;

use crate::harness::live::HARNESS_ID;
use crate::harness::operator::{Operator, OperatorShared, KILLED_KEY};
use crate::harness::report::{HostInfo, RunReport};
use crate::harness::scenario::Scenario;
use crate::harness::tap::TapEntry;
use crate::harness::{build_managers, build_rsu, build_vehicle, build_world, evaluate};
use crate::runtime::{SimConfig, SimRuntime};

/// Granularity at which the host reacts to operator requests.
const STEP_NS: i64 = 100_000_000;

pub struct SimOutcome {
    pub report: RunReport,
    pub tap: Vec<TapEntry>,
}

pub fn run_sim(scenario: &Scenario) -> anyhow::Result<SimOutcome> {
    let map = Arc::new(scenario.load_map()?);
    scenario.validate(&map)?;
    let mut rt = SimRuntime::new(SimConfig {
        seed: scenario.seed,
        ..SimConfig::default()
    });
    rt.add(Box::new(build_world(&map)?))?;
    rt.add(Box::new(build_rsu(&map, scenario)?))?;
    rt.add(Box::new(build_managers(&map, scenario)))?;
    for v in &scenario.vehicles {
        rt.add(Box::new(build_vehicle(&map, v)?))?;
    }
    let shared = Arc::new(Mutex::new(OperatorShared::default()));
    rt.add(Box::new(Operator::new(scenario, Arc::clone(&shared))))?;

    let end = rt.now_ns() + (scenario.duration_s * 1e9) as i64;
    let mut aborted = None;
    loop {
        let next = (rt.now_ns() + STEP_NS).min(end);
        rt.run_until(next);
        let (kills, done) = {
            let mut s = shared.lock().unwrap();
            (std::mem::take(&mut s.kills), s.done)
        };
        for ns in kills {
            if rt.kill(&ns) {
                rt.inject(HARNESS_ID, KILLED_KEY, json!({"ns": ns}));
            }
        }
        if done {
            info!(t_s = rt.now_ns() as f64 / 1e9, "stop condition reached");
            break;
        }
        if next >= end {
            if scenario.stop_when != crate::harness::StopWhen::Duration {
                aborted = Some(format!("stop condition not reached within {} s", scenario.duration_s));
            }
            break;
        }
    }

    let tap = rt.take_tap();
    let mut report = evaluate(scenario, &map, "sim", &tap);
    report.host = HostInfo::collect();
    report.aborted = aborted;
    Ok(SimOutcome { report, tap })
}
