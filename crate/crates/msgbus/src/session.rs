//! Client side of the bus.
//!
//! A session owns one TCP connection. Publishing is serialized through a
//! writer lock; a background reader thread applies remap rules and fans each
//! inbound envelope out to every local [`Subscriber`] with a matching
//! pattern.

use std::collections::HashMap;
use std::io::{BufReader, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender, TryRecvError};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde_json::{json, Value};
use tracing::warn;

use crate::envelope::{ctl, is_control_key, now_ns, Envelope};
use crate::error::BusError;
use crate::keyexpr::{KeyExpr, RemapRule};
use crate::wire::{self, DEFAULT_MAX_FRAME_BYTES};

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub max_frame_bytes: usize,
    pub request_timeout: Duration,
    pub connect_timeout: Duration,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            max_frame_bytes: DEFAULT_MAX_FRAME_BYTES,
            request_timeout: Duration::from_secs(5),
            connect_timeout: Duration::from_secs(5),
        }
    }
}

struct LocalSub {
    id: u64,
    patterns: Vec<KeyExpr>,
    tx: Sender<Envelope>,
}

#[derive(Default)]
struct Inner {
    subs: Mutex<Vec<LocalSub>>,
    remaps: Mutex<Vec<RemapRule>>,
    pending: Mutex<HashMap<u64, Sender<Result<(), BusError>>>>,
    closed: AtomicBool,
}

impl Inner {
    fn dispatch(&self, mut env: Envelope) {
        let Ok(mut key) = KeyExpr::parse_literal(&env.key) else {
            return;
        };
        if let Some(k) = self.remaps.lock().unwrap().iter().find_map(|r| r.apply(&key)) {
            env.key = k.as_str().to_string();
            key = k;
        }
        let mut subs = self.subs.lock().unwrap();
        subs.retain(|s| {
            if s.patterns.iter().any(|p| p.matches(&key)) {
                s.tx.send(env.clone()).is_ok()
            } else {
                true
            }
        });
    }

    fn resolve(&self, env: &Envelope) {
        let Some(req) = env.payload.get("req").and_then(Value::as_u64) else {
            if env.key == ctl::ERROR {
                warn!(payload = %env.payload, "router error");
            }
            return;
        };
        let Some(tx) = self.pending.lock().unwrap().remove(&req) else {
            return;
        };
        let result = if env.key == ctl::ACK {
            Ok(())
        } else {
            Err(rejection(&env.payload))
        };
        let _ = tx.send(result);
    }

    fn close(&self) {
        self.closed.store(true, Ordering::SeqCst);
        self.subs.lock().unwrap().clear();
        for (_, tx) in self.pending.lock().unwrap().drain() {
            let _ = tx.send(Err(BusError::Closed));
        }
    }
}

fn rejection(payload: &Value) -> BusError {
    BusError::Rejected {
        code: payload
            .get("code")
            .and_then(Value::as_str)
            .unwrap_or("unknown")
            .to_string(),
        reason: payload.get("reason").and_then(Value::as_str).unwrap_or("").to_string(),
    }
}

pub struct Session {
    id: String,
    config: SessionConfig,
    writer: Mutex<TcpStream>,
    seqs: Mutex<HashMap<String, u64>>,
    inner: Arc<Inner>,
    next_id: AtomicU64,
    reader: Mutex<Option<JoinHandle<()>>>,
}

impl Session {
    pub fn connect(addr: impl ToSocketAddrs, client_id: &str) -> Result<Self, BusError> {
        Self::connect_with(addr, client_id, SessionConfig::default())
    }

    pub fn connect_with(addr: impl ToSocketAddrs, client_id: &str, config: SessionConfig) -> Result<Self, BusError> {
        if client_id.is_empty() {
            return Err(BusError::Protocol("client id must not be empty".into()));
        }
        let mut last_err = None;
        let mut stream = None;
        for a in addr.to_socket_addrs()? {
            match TcpStream::connect_timeout(&a, config.connect_timeout) {
                Ok(s) => {
                    stream = Some(s);
                    break;
                }
                Err(e) => last_err = Some(e),
            }
        }
        let stream = match (stream, last_err) {
            (Some(s), _) => s,
            (None, Some(e)) => return Err(e.into()),
            (None, None) => return Err(BusError::Protocol("no address to connect to".into())),
        };
        stream.set_nodelay(true)?;

        let session = Self {
            id: client_id.to_string(),
            config,
            writer: Mutex::new(stream.try_clone()?),
            seqs: Mutex::default(),
            inner: Arc::default(),
            next_id: AtomicU64::new(1),
            reader: Mutex::new(None),
        };
        session.send(ctl::HELLO, json!({"client_id": client_id}))?;

        let mut reader = BufReader::new(stream.try_clone()?);
        stream.set_read_timeout(Some(session.config.request_timeout))?;
        let reply = wire::read_frame(&mut reader, session.config.max_frame_bytes)
            .map_err(|e| match e {
                BusError::Io(io)
                    if matches!(io.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) =>
                {
                    BusError::Timeout("router welcome".into())
                }
                other => other,
            })?
            .ok_or(BusError::Closed)?;
        stream.set_read_timeout(None)?;
        match reply.key.as_str() {
            ctl::WELCOME => {}
            ctl::ERROR => return Err(rejection(&reply.payload)),
            other => return Err(BusError::Protocol(format!("expected welcome, got `{other}`"))),
        }

        let inner = Arc::clone(&session.inner);
        let max = session.config.max_frame_bytes;
        let handle = thread::Builder::new()
            .name(format!("bus-reader-{client_id}"))
            .spawn(move || {
                loop {
                    match wire::read_frame(&mut reader, max) {
                        Ok(Some(env)) if is_control_key(&env.key) => inner.resolve(&env),
                        Ok(Some(env)) => inner.dispatch(env),
                        Ok(None) => break,
                        Err(BusError::FrameTooLarge { size, .. }) => {
                            warn!(size, "dropping oversize inbound frame");
                        }
                        Err(_) => break,
                    }
                }
                inner.close();
            })?;
        *session.reader.lock().unwrap() = Some(handle);
        Ok(session)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn is_closed(&self) -> bool {
        self.inner.closed.load(Ordering::SeqCst)
    }

    /// Publishes `payload` on the literal key and returns the sequence
    /// number used. Oversize payloads fail locally and consume no sequence.
    pub fn publish(&self, key: &str, payload: Value) -> Result<u64, BusError> {
        let parsed = KeyExpr::parse_literal(key)?;
        if is_control_key(parsed.as_str()) {
            return Err(BusError::Protocol(format!("`{key}` uses the reserved control prefix")));
        }
        self.send(key, payload)
    }

    fn send(&self, key: &str, payload: Value) -> Result<u64, BusError> {
        if self.is_closed() {
            return Err(BusError::Closed);
        }
        let mut seqs = self.seqs.lock().unwrap();
        let seq = seqs.get(key).copied().unwrap_or(0) + 1;
        let env = Envelope {
            key: key.to_string(),
            sender_id: self.id.clone(),
            seq,
            timestamp_ns: now_ns(),
            payload,
        };
        let frame = wire::encode_frame(&env, self.config.max_frame_bytes)?;
        self.writer
            .lock()
            .unwrap()
            .write_all(&frame)
            .map_err(|_| BusError::Closed)?;
        seqs.insert(key.to_string(), seq);
        Ok(seq)
    }

    fn request(&self, key: &str, mut payload: Value) -> Result<(), BusError> {
        let req = self.next_id.fetch_add(1, Ordering::SeqCst);
        payload["req"] = json!(req);
        let (tx, rx) = mpsc::channel();
        self.inner.pending.lock().unwrap().insert(req, tx);
        if let Err(e) = self.send(key, payload) {
            self.inner.pending.lock().unwrap().remove(&req);
            return Err(e);
        }
        match rx.recv_timeout(self.config.request_timeout) {
            Ok(r) => r,
            Err(RecvTimeoutError::Timeout) => {
                self.inner.pending.lock().unwrap().remove(&req);
                Err(BusError::Timeout(format!("ack for {key}")))
            }
            Err(RecvTimeoutError::Disconnected) => Err(BusError::Closed),
        }
    }

    pub fn subscribe(&self, pattern: &str) -> Result<Subscriber, BusError> {
        self.subscribe_many(&[pattern])
    }

    /// One stream over several patterns; an envelope matching more than one
    /// of them is yielded once. Returns after the router acknowledged every
    /// pattern.
    pub fn subscribe_many(&self, patterns: &[&str]) -> Result<Subscriber, BusError> {
        let parsed = patterns
            .iter()
            .map(|p| KeyExpr::parse(p))
            .collect::<Result<Vec<_>, _>>()?;
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let (tx, rx) = mpsc::channel();
        self.inner.subs.lock().unwrap().push(LocalSub {
            id,
            patterns: parsed,
            tx,
        });
        let sub = Subscriber {
            id,
            rx,
            inner: Arc::clone(&self.inner),
        };
        for p in patterns {
            self.request(ctl::SUBSCRIBE, json!({"pattern": p}))?;
        }
        Ok(sub)
    }

    /// Installs a remap rule: inbound keys matching `external` are re-keyed
    /// through `internal` before local delivery. The external pattern is
    /// registered with the router so matching traffic reaches this session.
    pub fn remap(&self, external: &str, internal: &str) -> Result<(), BusError> {
        let rule = RemapRule::new(external, internal)?;
        self.inner.remaps.lock().unwrap().push(rule);
        self.request(ctl::REMAP, json!({"external": external, "internal": internal}))
    }

    pub fn close(&self) {
        let _ = self.writer.lock().unwrap().shutdown(Shutdown::Both);
        if let Some(h) = self.reader.lock().unwrap().take() {
            let _ = h.join();
        }
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        self.close();
    }
}

/// A stream of envelopes for one subscription.
pub struct Subscriber {
    id: u64,
    rx: Receiver<Envelope>,
    inner: Arc<Inner>,
}

impl Subscriber {
    pub fn recv(&self) -> Result<Envelope, BusError> {
        self.rx.recv().map_err(|_| BusError::Closed)
    }

    /// `Ok(None)` on timeout, `Err(Closed)` once the session is gone.
    pub fn recv_timeout(&self, timeout: Duration) -> Result<Option<Envelope>, BusError> {
        match self.rx.recv_timeout(timeout) {
            Ok(env) => Ok(Some(env)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(BusError::Closed),
        }
    }

    pub fn try_recv(&self) -> Result<Option<Envelope>, BusError> {
        match self.rx.try_recv() {
            Ok(env) => Ok(Some(env)),
            Err(TryRecvError::Empty) => Ok(None),
            Err(TryRecvError::Disconnected) => Err(BusError::Closed),
        }
    }
}

impl Iterator for Subscriber {
    type Item = Envelope;

    fn next(&mut self) -> Option<Envelope> {
        self.rx.recv().ok()
    }
}

impl Drop for Subscriber {
    fn drop(&mut self) {
        if let Ok(mut subs) = self.inner.subs.lock() {
            subs.retain(|s| s.id != self.id);
        }
    }
}
