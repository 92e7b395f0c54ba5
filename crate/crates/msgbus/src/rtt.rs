//! Ping/pong round-trip probes over the bus.
//!
//! A responder for peer `P` listens on `avp/probe/ping/P` and answers each
//! ping on `avp/probe/pong/<requester>`, where the requester is the ping's
//! sender id.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::debug;

use crate::error::BusError;
use crate::session::Session;

pub fn ping_key(peer_id: &str) -> String {
    format!("avp/probe/ping/{peer_id}")
}

pub fn pong_key(requester_id: &str) -> String {
    format!("avp/probe/pong/{requester_id}")
}

/// Mean, standard deviation (population), maximum and count of RTT samples
/// in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RttStats {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub max_ms: f64,
    pub samples: u64,
}

impl RttStats {
    pub fn from_samples(samples_ms: &[f64]) -> Option<Self> {
        if samples_ms.is_empty() {
            return None;
        }
        let n = samples_ms.len() as f64;
        let mean = samples_ms.iter().sum::<f64>() / n;
        let var = samples_ms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let max = samples_ms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some(Self {
            mean_ms: mean,
            std_ms: var.sqrt(),
            max_ms: max.max(mean),
            samples: samples_ms.len() as u64,
        })
    }
}

impl fmt::Display for RttStats {
    /// `mean ± std | max | samples`, two decimals, as in the RTT table.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:.2} ± {:.2} | {:.2} | {}",
            self.mean_ms, self.std_ms, self.max_ms, self.samples
        )
    }
}

/// Answers pings addressed to `peer_id` on a background thread, sleeping
/// `delay` before each reply. The thread ends when the session closes.
pub fn spawn_echo_responder(session: Arc<Session>, peer_id: &str, delay: Duration) -> Result<JoinHandle<()>, BusError> {
    let sub = session.subscribe(&ping_key(peer_id))?;
    let peer = peer_id.to_string();
    Ok(thread::spawn(move || {
        for ping in sub {
            if !delay.is_zero() {
                thread::sleep(delay);
            }
            let nonce = ping.payload.get("nonce").cloned().unwrap_or(Value::Null);
            let reply = json!({"nonce": nonce, "responder": peer});
            if session.publish(&pong_key(&ping.sender_id), reply).is_err() {
                break;
            }
        }
    }))
}

#[derive(Debug, Clone)]
pub struct ProbeOptions {
    /// How long to keep waiting for outstanding pongs after the last ping.
    pub grace: Duration,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            grace: Duration::from_secs(1),
        }
    }
}

/// Sends `count` pings `interval` apart and returns the raw RTT samples
/// (milliseconds) for the pongs that came back. Lost pongs are skipped.
pub fn rtt_probe_samples(
    session: &Session,
    peer_id: &str,
    count: u32,
    interval: Duration,
    options: &ProbeOptions,
) -> Result<Vec<f64>, BusError> {
    let pongs = session.subscribe(&pong_key(session.id()))?;
    let mut sent: HashMap<u64, Instant> = HashMap::with_capacity(count as usize);
    let mut samples = Vec::with_capacity(count as usize);
    // nonces are unique per probe call so stale pongs from earlier calls are ignored
    let base: u64 = (crate::envelope::now_ns() as u64) << 16;

    let drain_until =
        |deadline: Instant, sent: &mut HashMap<u64, Instant>, samples: &mut Vec<f64>| -> Result<(), BusError> {
            loop {
                let now = Instant::now();
                if now >= deadline {
                    return Ok(());
                }
                let Some(pong) = pongs.recv_timeout(deadline - now)? else {
                    return Ok(());
                };
                let received = Instant::now();
                if pong.payload.get("responder").and_then(Value::as_str) != Some(peer_id) {
                    continue;
                }
                let Some(nonce) = pong.payload.get("nonce").and_then(Value::as_u64) else {
                    continue;
                };
                if let Some(t0) = sent.remove(&nonce) {
                    samples.push((received - t0).as_secs_f64() * 1e3);
                }
                if sent.is_empty() && samples.len() as u32 == count {
                    return Ok(());
                }
            }
        };

    let start = Instant::now();
    for i in 0..count {
        let nonce = base + i as u64;
        sent.insert(nonce, Instant::now());
        session.publish(&ping_key(peer_id), json!({"nonce": nonce}))?;
        let next = start + interval * (i + 1);
        drain_until(next, &mut sent, &mut samples)?;
    }
    if !sent.is_empty() {
        drain_until(Instant::now() + options.grace, &mut sent, &mut samples)?;
    }
    debug!(peer = peer_id, sent = count, received = samples.len(), "probe finished");
    Ok(samples)
}

pub fn rtt_probe(session: &Session, peer_id: &str, count: u32, interval: Duration) -> Result<RttStats, BusError> {
    rtt_probe_with(session, peer_id, count, interval, &ProbeOptions::default())
}

pub fn rtt_probe_with(
    session: &Session,
    peer_id: &str,
    count: u32,
    interval: Duration,
    options: &ProbeOptions,
) -> Result<RttStats, BusError> {
    let samples = rtt_probe_samples(session, peer_id, count, interval, options)?;
    RttStats::from_samples(&samples).ok_or_else(|| BusError::ProbeFailed {
        peer: peer_id.to_string(),
        sent: count,
    })
}
