//! Oracles shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

pub mod fsm_table;
pub mod oracles;

use std::path::PathBuf;

use avp_core::harness::Scenario;

pub fn repo() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn scenario(name: &str) -> Scenario {
    Scenario::load(scenario_path(name)).unwrap()
}

pub fn scenario_path(name: &str) -> PathBuf {
    repo().join(format!("scenarios/{name}.yaml"))
}
