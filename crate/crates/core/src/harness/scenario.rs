//! Scenario files (YAML or JSON).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordination::AllocationPolicy;
use crate::node::LifecycleState;
use crate::perception::{DetectorModel, DEFAULT_THETA};
use crate::topics::{validate_ns, CommandKind};
use crate::world::{LotMap, MapError, DEFAULT_CLASS};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("reading scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing scenario: {0}")]
    Yaml(#[from] serde_yaml::Error),
    #[error("loading map {path}: {source}")]
    Map { path: PathBuf, source: MapError },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleSpec {
    pub ns: String,
    pub spawn_index: usize,
    #[serde(default = "default_class")]
    pub class_label: String,
}

fn default_class() -> String {
    DEFAULT_CLASS.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedCommand {
    pub at_s: f64,
    pub kind: CommandKind,
    pub target_ns: String,
}

/// Kill a vehicle process at `at_s`, or at the first moment after `at_s`
/// that it reports `after_state`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fault {
    #[serde(default)]
    pub at_s: f64,
    pub kill_ns: String,
    #[serde(default)]
    pub after_state: Option<LifecycleState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopWhen {
    /// Run until `duration_s`.
    #[default]
    Duration,
    AllParked,
    AllDeparted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub map_file: PathBuf,
    #[serde(default)]
    pub vehicles: Vec<VehicleSpec>,
    #[serde(default)]
    pub detector: DetectorModel,
    #[serde(default)]
    pub command_script: Vec<ScriptedCommand>,
    #[serde(default)]
    pub seed: u64,
    pub duration_s: f64,
    #[serde(default)]
    pub faults: Vec<Fault>,
    #[serde(default)]
    pub stop_when: StopWhen,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default)]
    pub policy: AllocationPolicy,
}

fn default_theta() -> f64 {
    DEFAULT_THETA
}

impl Scenario {
    /// Parses YAML (a superset of JSON). A relative `map_file` is resolved
    /// against the scenario's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let mut s: Scenario = serde_yaml::from_str(&std::fs::read_to_string(path)?)?;
        if s.map_file.is_relative() {
            if let Some(dir) = path.parent() {
                s.map_file = dir.join(&s.map_file);
            }
        }
        if s.name.is_empty() {
            s.name = path
                .file_stem()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
        }
        Ok(s)
    }

    pub fn load_map(&self) -> Result<LotMap, ScenarioError> {
        LotMap::load(&self.map_file).map_err(|source| ScenarioError::Map {
            path: self.map_file.clone(),
            source,
        })
    }

    pub fn validate(&self, map: &LotMap) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return bad(format!("duration_s must be positive, got {}", self.duration_s));
        }
        if !(0.0..1.0).contains(&self.theta) {
            return bad(format!("theta must be in [0, 1), got {}", self.theta));
        }
        self.detector
            .validate()
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        let mut names = BTreeSet::new();
        let mut slots = BTreeSet::new();
        for v in &self.vehicles {
            validate_ns(&v.ns).map_err(ScenarioError::Invalid)?;
            if !names.insert(v.ns.as_str()) {
                return bad(format!("duplicate vehicle namespace {}", v.ns));
            }
            if v.spawn_index >= map.spawn_points.len() {
                return bad(format!(
                    "vehicle {} spawn_index {} but the map has {} spawn points",
                    v.ns,
                    v.spawn_index,
                    map.spawn_points.len()
                ));
            }
            if !slots.insert(v.spawn_index) {
                return bad(format!("spawn_index {} used twice", v.spawn_index));
            }
        }
        let mut last = f64::NEG_INFINITY;
        for c in &self.command_script {
            if !(c.at_s.is_finite() && c.at_s >= 0.0) {
                return bad(format!("command at_s {} must be finite and non-negative", c.at_s));
            }
            if c.at_s < last {
                return bad(format!(
                    "command script times must be nondecreasing ({} after {last})",
                    c.at_s
                ));
            }
            last = c.at_s;
            if !names.contains(c.target_ns.as_str()) {
                return bad(format!("command targets unknown vehicle {}", c.target_ns));
            }
        }
        for f in &self.faults {
            if !names.contains(f.kill_ns.as_str()) {
                return bad(format!("fault targets unknown vehicle {}", f.kill_ns));
            }
        }
        Ok(())
    }

    /// Convenience for generated scenarios: full lifecycle for every vehicle.
    pub fn full_lifecycle_script(vehicles: &[VehicleSpec], at_s: f64) -> Vec<ScriptedCommand> {
        [CommandKind::Dropoff, CommandKind::Park, CommandKind::Retrieve]
            .into_iter()
            .flat_map(|kind| {
                vehicles.iter().map(move |v| ScriptedCommand {
                    at_s,
                    kind,
                    target_ns: v.ns.clone(),
                })
            })
            .collect()
    }
}
