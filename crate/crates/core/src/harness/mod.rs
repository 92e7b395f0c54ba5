//! Scenario running, recording and checking.

pub mod assertions;
pub mod gateway;
pub mod live;
pub mod operator;
pub mod report;
pub mod scenario;
pub mod sim;
pub mod tap;

use std::sync::Arc;

use anyhow::Context;

use crate::coordination::{Managers, ManagersConfig};
use crate::node::{NodeConfig, VehicleNode};
use crate::perception::{RsuComponent, RsuConfig};
use crate::topics;
use crate::world::{LotMap, WorldComponent, WorldConfig};

pub use assertions::{assert_suite, AssertionResult, SuiteContext};
pub use report::RunReport;
pub use scenario::{Scenario, ScenarioError, StopWhen, VehicleSpec};
pub use tap::TapEntry;

/// Components in the order they are started: infrastructure first, then
/// coordination, then vehicles.
pub fn launch_order(scenario: &Scenario) -> Vec<String> {
    [topics::WORLD_ID, topics::RSU_ID, topics::MANAGERS_ID]
        .into_iter()
        .map(String::from)
        .chain(scenario.vehicles.iter().map(|v| v.ns.clone()))
        .collect()
}

pub fn suite_context(scenario: &Scenario, map: &LotMap) -> SuiteContext {
    SuiteContext {
        spot_ids: Some(map.spot_ids().collect()),
        launch_order: launch_order(scenario),
    }
}

pub fn build_world(map: &Arc<LotMap>) -> anyhow::Result<WorldComponent> {
    Ok(WorldComponent::new(WorldConfig {
        map: Some(Arc::clone(map)),
        ..WorldConfig::default()
    })?)
}

pub fn build_rsu(map: &Arc<LotMap>, scenario: &Scenario) -> anyhow::Result<RsuComponent> {
    let config = RsuConfig {
        theta: scenario.theta,
        model: scenario.detector.clone(),
        ..RsuConfig::default()
    };
    Ok(RsuComponent::new(Arc::clone(map), config)?)
}

pub fn build_managers(map: &Arc<LotMap>, scenario: &Scenario) -> Managers {
    Managers::new(ManagersConfig {
        policy: scenario.policy,
        map: Some(Arc::clone(map)),
        ..ManagersConfig::default()
    })
}

pub fn build_vehicle(map: &Arc<LotMap>, spec: &VehicleSpec) -> anyhow::Result<VehicleNode> {
    let pose = *map
        .spawn_points
        .get(spec.spawn_index)
        .with_context(|| format!("no spawn point {} for {}", spec.spawn_index, spec.ns))?;
    let mut config = NodeConfig::new(spec.ns.clone(), pose);
    config.class = spec.class_label.clone();
    Ok(VehicleNode::new(config, Arc::clone(map)))
}

/// Report plus assertion results for a finished recording.
pub fn evaluate(scenario: &Scenario, map: &LotMap, mode: &str, tap: &[TapEntry]) -> RunReport {
    let mut report = RunReport::from_tap(&scenario.name, mode, scenario.seed, tap);
    report.assertion_results = assert_suite(tap, &suite_context(scenario, map));
    report
}
