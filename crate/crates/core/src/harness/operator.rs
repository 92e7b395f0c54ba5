//! Scripted operator. A command becomes due at its `at_s` and is sent the
//! first time its target reports the state in which the command is legal,
//! so scripts do not have to guess how long driving takes.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::{Arc, Mutex};

use avp_msgbus::Envelope;
use serde_json::json;
use tracing::info;

use crate::harness::scenario::{Fault, Scenario, ScriptedCommand, StopWhen};
use crate::node::LifecycleState;
use crate::runtime::{Component, Outbox};
use crate::topics::{self, leaf, ns_key, CommandMsg, StatusMsg, StatusTableMsg};

pub const OPERATOR_ID: &str = "operator";
pub const FAULT_KEY: &str = "avp/harness/fault";
/// Published by the host once the process is actually gone.
pub const KILLED_KEY: &str = "avp/harness/killed";
pub const OPERATOR_TICK_NS: i64 = 100_000_000;

/// What the operator reports back to whoever hosts the run.
#[derive(Debug, Default)]
pub struct OperatorShared {
    pub done: bool,
    /// Vehicles to kill; drained by the host.
    pub kills: Vec<String>,
    pub states: BTreeMap<String, LifecycleState>,
}

pub struct Operator {
    vehicles: Vec<String>,
    script: VecDeque<ScriptedCommand>,
    due: Vec<ScriptedCommand>,
    faults: Vec<Fault>,
    stop_when: StopWhen,
    started_ns: i64,
    states: BTreeMap<String, (u64, LifecycleState)>,
    /// Vehicles sent a command whose status has not moved since.
    awaiting: BTreeMap<String, u64>,
    killed: BTreeSet<String>,
    shared: Arc<Mutex<OperatorShared>>,
}

impl Operator {
    pub fn new(scenario: &Scenario, shared: Arc<Mutex<OperatorShared>>) -> Self {
        Self {
            vehicles: scenario.vehicles.iter().map(|v| v.ns.clone()).collect(),
            script: scenario.command_script.iter().cloned().collect(),
            due: Vec::new(),
            faults: scenario.faults.clone(),
            stop_when: scenario.stop_when,
            started_ns: 0,
            states: BTreeMap::new(),
            awaiting: BTreeMap::new(),
            killed: BTreeSet::new(),
            shared,
        }
    }

    fn state_of(&self, ns: &str) -> Option<LifecycleState> {
        self.states.get(ns).map(|(_, s)| *s)
    }

    fn observe(&mut self, ns: &str, seq: u64, state: LifecycleState) {
        let entry = self.states.entry(ns.to_string()).or_insert((0, state));
        if seq >= entry.0 {
            *entry = (seq, state);
            if self.awaiting.get(ns).is_some_and(|&s| seq > s) {
                self.awaiting.remove(ns);
            }
        }
    }

    fn finished(&self) -> bool {
        let target = match self.stop_when {
            StopWhen::Duration => return false,
            StopWhen::AllParked => LifecycleState::Parked,
            StopWhen::AllDeparted => LifecycleState::Departed,
        };
        self.vehicles
            .iter()
            .filter(|ns| !self.killed.contains(*ns))
            .all(|ns| self.state_of(ns) == Some(target))
    }
}

impl Component for Operator {
    fn name(&self) -> &str {
        OPERATOR_ID
    }

    fn subscriptions(&self) -> Vec<String> {
        // The coordinator's table covers vehicles that came up before us.
        vec![format!("avp/*/{}", leaf::STATUS), topics::COORD_STATUS.to_string()]
    }

    fn tick_period_ns(&self) -> Option<i64> {
        Some(OPERATOR_TICK_NS)
    }

    fn start(&mut self, now_ns: i64, _out: &mut Outbox) {
        self.started_ns = now_ns;
    }

    fn on_message(&mut self, env: &Envelope, _now_ns: i64, _out: &mut Outbox) {
        if env.key == topics::COORD_STATUS {
            if env.sender_id != topics::MANAGERS_ID {
                return;
            }
            let Ok(table) = serde_json::from_value::<StatusTableMsg>(env.payload.clone()) else {
                return;
            };
            for (ns, row) in table {
                self.observe(&ns, row.seq, row.state);
            }
            return;
        }
        let Ok(status) = serde_json::from_value::<StatusMsg>(env.payload.clone()) else {
            return;
        };
        if env.sender_id == status.ns {
            self.observe(&status.ns, status.seq, status.state);
        }
    }

    fn on_tick(&mut self, now_ns: i64, out: &mut Outbox) {
        let elapsed_s = (now_ns - self.started_ns) as f64 / 1e9;
        while self.script.front().is_some_and(|c| c.at_s <= elapsed_s) {
            self.due.push(self.script.pop_front().unwrap());
        }

        let mut sent_to = BTreeSet::new();
        let mut remaining = Vec::with_capacity(self.due.len());
        for cmd in std::mem::take(&mut self.due) {
            let ns = cmd.target_ns.as_str();
            let ready = !self.killed.contains(ns)
                && !self.awaiting.contains_key(ns)
                && !sent_to.contains(ns)
                && self.state_of(ns) == Some(cmd.kind.legal_in());
            if ready {
                let seq = self.states[ns].0;
                self.awaiting.insert(ns.to_string(), seq);
                sent_to.insert(ns.to_string());
                out.publish(
                    ns_key(ns, leaf::CMD),
                    CommandMsg {
                        kind: cmd.kind,
                        target_ns: ns.to_string(),
                    },
                );
            } else {
                remaining.push(cmd);
            }
        }
        self.due = remaining;

        let mut fired = Vec::new();
        self.faults.retain(|f| {
            let at = elapsed_s >= f.at_s;
            let state_ok = f
                .after_state
                .is_none_or(|st| self.states.get(&f.kill_ns).map(|x| x.1) == Some(st));
            if at && state_ok {
                fired.push(f.kill_ns.clone());
                false
            } else {
                true
            }
        });
        for ns in &fired {
            info!(ns, elapsed_s, "injecting fault: kill");
            out.publish(FAULT_KEY, json!({"kill_ns": ns, "state": self.state_of(ns)}));
            self.killed.insert(ns.clone());
        }

        let done = self.finished();
        let mut shared = self.shared.lock().unwrap();
        shared.kills.extend(fired);
        shared.done = done;
        shared.states = self.states.iter().map(|(k, v)| (k.clone(), v.1)).collect();
    }
}
