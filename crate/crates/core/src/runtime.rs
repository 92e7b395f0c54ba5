//! Component hosting. The same component code runs either against a live
//! router (wall clock, one session per component) or inside `SimRuntime`,
//! a single-threaded virtual-time bus that makes whole scenarios
//! reproducible from a seed.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::sync::atomic::{AtomicBool, Ordering as AtomicOrdering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use avp_msgbus::{now_ns, BusError, Envelope, KeyExpr, Session};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::Value;
use tracing::{debug, warn};

use crate::harness::tap::TapEntry;
use crate::topics::ready_key;

/// Messages a component wants published, in order.
#[derive(Debug, Default)]
pub struct Outbox {
    msgs: Vec<(String, Value)>,
}

impl Outbox {
    pub fn publish(&mut self, key: impl Into<String>, payload: impl Serialize) {
        let value = serde_json::to_value(payload).expect("payload serializes");
        self.msgs.push((key.into(), value));
    }

    pub fn drain(&mut self) -> std::vec::Drain<'_, (String, Value)> {
        self.msgs.drain(..)
    }

    pub fn is_empty(&self) -> bool {
        self.msgs.is_empty()
    }

    pub fn messages(&self) -> &[(String, Value)] {
        &self.msgs
    }
}

pub trait Component: Send {
    /// Client id on the bus.
    fn name(&self) -> &str;
    fn subscriptions(&self) -> Vec<String>;
    fn tick_period_ns(&self) -> Option<i64>;
    fn start(&mut self, now_ns: i64, out: &mut Outbox);
    fn on_message(&mut self, env: &Envelope, now_ns: i64, out: &mut Outbox);
    fn on_tick(&mut self, now_ns: i64, out: &mut Outbox);
    /// A finished component is stopped by its host after flushing.
    fn is_finished(&self) -> bool {
        false
    }
}

fn flush(session: &Session, out: &mut Outbox) -> Result<(), BusError> {
    for (key, payload) in out.drain() {
        session.publish(&key, payload)?;
    }
    Ok(())
}

/// Runs `comp` on a connected session until it finishes, `stop` is set, or
/// the router goes away (returned as an error).
pub fn run_live(comp: &mut dyn Component, session: &Session, stop: &AtomicBool) -> Result<(), BusError> {
    let patterns = comp.subscriptions();
    let pattern_refs: Vec<&str> = patterns.iter().map(String::as_str).collect();
    let sub = if pattern_refs.is_empty() {
        None
    } else {
        Some(session.subscribe_many(&pattern_refs)?)
    };
    let mut out = Outbox::default();
    comp.start(now_ns(), &mut out);
    flush(session, &mut out)?;
    session.publish(&ready_key(comp.name()), serde_json::json!({"name": comp.name()}))?;

    let period = comp.tick_period_ns().map(|p| Duration::from_nanos(p.max(1) as u64));
    let idle = Duration::from_millis(100);
    let mut next_tick = period.map(|p| Instant::now() + p);
    while !stop.load(AtomicOrdering::Relaxed) && !comp.is_finished() {
        let now = Instant::now();
        if let (Some(p), Some(due)) = (period, next_tick) {
            if now >= due {
                comp.on_tick(now_ns(), &mut out);
                flush(session, &mut out)?;
                // skip missed ticks instead of bursting to catch up
                let mut nt = due + p;
                if nt <= now {
                    nt = now + p;
                }
                next_tick = Some(nt);
                continue;
            }
        }
        let wait = next_tick
            .map(|d| d.saturating_duration_since(now))
            .unwrap_or(idle)
            .min(idle);
        match &sub {
            Some(sub) => {
                if let Some(env) = sub.recv_timeout(wait)? {
                    comp.on_message(&env, now_ns(), &mut out);
                    flush(session, &mut out)?;
                }
            }
            None => {
                std::thread::sleep(wait);
                if session.is_closed() {
                    return Err(BusError::Closed);
                }
            }
        }
    }
    flush(session, &mut out)
}

/// Connects and runs a component on a background thread.
pub fn spawn_live(
    mut comp: Box<dyn Component>,
    addr: std::net::SocketAddr,
    stop: Arc<AtomicBool>,
) -> Result<std::thread::JoinHandle<Result<(), BusError>>, BusError> {
    let session = Session::connect(addr, comp.name())?;
    Ok(std::thread::spawn(move || {
        let result = run_live(comp.as_mut(), &session, &stop);
        session.close();
        result
    }))
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub seed: u64,
    /// Minimum one-way delivery latency.
    pub base_latency_ns: i64,
    /// Uniform extra latency in [0, jitter).
    pub jitter_ns: i64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            base_latency_ns: 500_000,
            jitter_ns: 1_500_000,
        }
    }
}

#[derive(Debug)]
enum Pending {
    Deliver { to: usize, env: Envelope },
    Tick { to: usize },
}

#[derive(Debug)]
struct Event {
    at: i64,
    order: u64,
    what: Pending,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.order) == (other.at, other.order)
    }
}

impl Eq for Event {}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.order).cmp(&(self.at, self.order))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Slot {
    comp: Box<dyn Component>,
    patterns: Vec<KeyExpr>,
    alive: bool,
}

/// Deterministic in-process bus. Every publish is recorded in the tap at
/// its virtual publish time and delivered to each matching component after
/// a seeded latency; deliveries on a (sender, receiver) link never
/// overtake each other.
pub struct SimRuntime {
    now: i64,
    slots: Vec<Slot>,
    queue: BinaryHeap<Event>,
    order: u64,
    seqs: BTreeMap<(String, String), u64>,
    link_last: BTreeMap<(usize, usize), i64>,
    rng: ChaCha8Rng,
    config: SimConfig,
    tap: Vec<TapEntry>,
}

impl SimRuntime {
    pub fn new(config: SimConfig) -> Self {
        Self {
            now: 0,
            slots: Vec::new(),
            queue: BinaryHeap::new(),
            order: 0,
            seqs: BTreeMap::new(),
            link_last: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            tap: Vec::new(),
        }
    }

    pub fn now_ns(&self) -> i64 {
        self.now
    }

    pub fn tap(&self) -> &[TapEntry] {
        &self.tap
    }

    pub fn take_tap(&mut self) -> Vec<TapEntry> {
        std::mem::take(&mut self.tap)
    }

    fn push(&mut self, at: i64, what: Pending) {
        self.order += 1;
        self.queue.push(Event {
            at,
            order: self.order,
            what,
        });
    }

    /// Adds and starts a component at the current virtual time.
    pub fn add(&mut self, comp: Box<dyn Component>) -> Result<usize, BusError> {
        if self.slots.iter().any(|s| s.alive && s.comp.name() == comp.name()) {
            return Err(BusError::Rejected {
                code: "duplicate-client-id".into(),
                reason: format!("client id {:?} already connected", comp.name()),
            });
        }
        let patterns = comp
            .subscriptions()
            .iter()
            .map(|p| KeyExpr::parse(p))
            .collect::<Result<Vec<_>, _>>()?;
        let idx = self.slots.len();
        self.slots.push(Slot {
            comp,
            patterns,
            alive: true,
        });
        let mut out = Outbox::default();
        self.slots[idx].comp.start(self.now, &mut out);
        let name = self.slots[idx].comp.name().to_string();
        out.publish(ready_key(&name), serde_json::json!({"name": name}));
        self.dispatch(idx, &mut out);
        if let Some(p) = self.slots[idx].comp.tick_period_ns() {
            self.push(self.now + p.max(1), Pending::Tick { to: idx });
        }
        Ok(idx)
    }

    /// Stops a component as if its process died: nothing further is
    /// delivered to it or published by it.
    pub fn kill(&mut self, name: &str) -> bool {
        match self.slots.iter_mut().find(|s| s.alive && s.comp.name() == name) {
            Some(slot) => {
                slot.alive = false;
                debug!(name, at = self.now, "component killed");
                true
            }
            None => false,
        }
    }

    pub fn is_alive(&self, name: &str) -> bool {
        self.slots.iter().any(|s| s.alive && s.comp.name() == name)
    }

    /// Publishes on behalf of an external client (no component behind it).
    pub fn inject(&mut self, sender: &str, key: &str, payload: Value) {
        self.publish_from(None, sender, key, payload);
    }

    fn dispatch(&mut self, from: usize, out: &mut Outbox) {
        let sender = self.slots[from].comp.name().to_string();
        for (key, payload) in out.drain() {
            self.publish_from(Some(from), &sender, &key, payload);
        }
    }

    fn publish_from(&mut self, from: Option<usize>, sender: &str, key: &str, payload: Value) {
        let literal = match KeyExpr::parse_literal(key) {
            Ok(k) => k,
            Err(e) => {
                warn!(sender, key, error = %e, "dropping publish with invalid key");
                return;
            }
        };
        let seq = self.seqs.entry((sender.to_string(), key.to_string())).or_insert(0);
        *seq += 1;
        let env = Envelope {
            key: key.to_string(),
            sender_id: sender.to_string(),
            seq: *seq,
            timestamp_ns: self.now,
            payload,
        };
        self.tap.push(TapEntry {
            envelope: env.clone(),
            recv_ns: self.now,
        });
        let link_src = from.unwrap_or(usize::MAX);
        for to in 0..self.slots.len() {
            let slot = &self.slots[to];
            if !slot.alive || !slot.patterns.iter().any(|p| p.matches(&literal)) {
                continue;
            }
            let jitter = if self.config.jitter_ns > 0 {
                self.rng.gen_range(0..self.config.jitter_ns)
            } else {
                0
            };
            let mut at = self.now + self.config.base_latency_ns + jitter;
            let last = self.link_last.entry((link_src, to)).or_insert(i64::MIN);
            at = at.max(*last);
            *last = at;
            self.push(at, Pending::Deliver { to, env: env.clone() });
        }
    }

    /// Processes every event up to and including `t_end`, then sets the
    /// clock to `t_end`.
    pub fn run_until(&mut self, t_end: i64) {
        while self.queue.peek().is_some_and(|e| e.at <= t_end) {
            let ev = self.queue.pop().unwrap();
            self.now = self.now.max(ev.at);
            let mut out = Outbox::default();
            let idx = match ev.what {
                Pending::Deliver { to, env } => {
                    if !self.slots[to].alive {
                        continue;
                    }
                    self.slots[to].comp.on_message(&env, self.now, &mut out);
                    to
                }
                Pending::Tick { to } => {
                    if !self.slots[to].alive {
                        continue;
                    }
                    self.slots[to].comp.on_tick(self.now, &mut out);
                    if let Some(p) = self.slots[to].comp.tick_period_ns() {
                        self.push(self.now + p.max(1), Pending::Tick { to });
                    }
                    to
                }
            };
            self.dispatch(idx, &mut out);
            if self.slots[idx].comp.is_finished() {
                self.slots[idx].alive = false;
            }
        }
        self.now = self.now.max(t_end);
    }
}
