//! Central router: accepts client connections, tracks each client's
//! subscription patterns and forwards every data frame to each connection
//! holding at least one matching pattern.
//!
//! Each connection is served by one reader thread, so frames from a given
//! sender are forwarded in ingress order. Outbound frames go through a
//! per-connection channel drained by a dedicated writer thread.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde_json::{json, Value};
use tracing::{debug, info, warn};

use crate::envelope::{ctl, now_ns, Envelope};
use crate::keyexpr::KeyExpr;
use crate::wire::{self, RawFrame, DEFAULT_MAX_FRAME_BYTES};

#[derive(Debug, Clone)]
pub struct RouterConfig {
    pub max_frame_bytes: usize,
    pub hello_timeout: Duration,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            max_frame_bytes: DEFAULT_MAX_FRAME_BYTES,
            hello_timeout: Duration::from_secs(5),
        }
    }
}

struct ClientEntry {
    conn_id: u64,
    patterns: Vec<KeyExpr>,
    tx: Sender<Arc<Vec<u8>>>,
}

#[derive(Default)]
struct Shared {
    clients: Mutex<BTreeMap<String, ClientEntry>>,
    streams: Mutex<HashMap<u64, TcpStream>>,
    control_seq: Mutex<HashMap<String, u64>>,
    next_conn: AtomicU64,
    shutdown: AtomicBool,
}

impl Shared {
    fn control_frame(&self, key: &str, payload: Value, max: usize) -> Option<Arc<Vec<u8>>> {
        let seq = {
            let mut seqs = self.control_seq.lock().unwrap();
            let s = seqs.entry(key.to_string()).or_insert(0);
            *s += 1;
            *s
        };
        let env = Envelope {
            key: key.to_string(),
            sender_id: "router".into(),
            seq,
            timestamp_ns: now_ns(),
            payload,
        };
        wire::encode_frame(&env, max).ok().map(Arc::new)
    }
}

pub struct Router {
    listener: TcpListener,
    config: RouterConfig,
    shared: Arc<Shared>,
}

impl Router {
    pub fn bind(addr: impl ToSocketAddrs, config: RouterConfig) -> io::Result<Self> {
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            config,
            shared: Arc::default(),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener has an address")
    }

    /// Serves connections until shut down through a [`RouterHandle`].
    pub fn run(self) -> io::Result<()> {
        info!(addr = %self.local_addr(), "router listening");
        for stream in self.listener.incoming() {
            if self.shared.shutdown.load(Ordering::SeqCst) {
                break;
            }
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    warn!(error = %e, "accept failed");
                    continue;
                }
            };
            let shared = Arc::clone(&self.shared);
            let config = self.config.clone();
            thread::spawn(move || {
                if let Err(e) = serve_connection(stream, shared, config) {
                    debug!(error = %e, "connection ended");
                }
            });
        }
        Ok(())
    }

    pub fn spawn(self) -> RouterHandle {
        let addr = self.local_addr();
        let shared = Arc::clone(&self.shared);
        let thread = thread::spawn(move || {
            let _ = self.run();
        });
        RouterHandle {
            addr,
            shared,
            thread: Some(thread),
        }
    }
}

/// Owner of a router running on a background thread. Dropping it stops
/// the router and disconnects every client.
pub struct RouterHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    thread: Option<JoinHandle<()>>,
}

impl RouterHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Client ids currently connected.
    pub fn roster(&self) -> Vec<String> {
        self.shared.clients.lock().unwrap().keys().cloned().collect()
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if self.shared.shutdown.swap(true, Ordering::SeqCst) {
            return;
        }
        // wake the accept loop
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        for (_, s) in self.shared.streams.lock().unwrap().drain() {
            let _ = s.shutdown(Shutdown::Both);
        }
        self.shared.clients.lock().unwrap().clear();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for RouterHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

fn serve_connection(stream: TcpStream, shared: Arc<Shared>, config: RouterConfig) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let conn_id = shared.next_conn.fetch_add(1, Ordering::SeqCst);
    shared.streams.lock().unwrap().insert(conn_id, stream.try_clone()?);
    let result = serve_inner(&stream, conn_id, &shared, &config);
    shared.streams.lock().unwrap().remove(&conn_id);
    let _ = stream.shutdown(Shutdown::Both);
    result
}

fn serve_inner(stream: &TcpStream, conn_id: u64, shared: &Arc<Shared>, config: &RouterConfig) -> io::Result<()> {
    let max = config.max_frame_bytes;
    let mut reader = BufReader::new(stream.try_clone()?);

    stream.set_read_timeout(Some(config.hello_timeout))?;
    let hello = match wire::read_raw_frame(&mut reader, max)? {
        RawFrame::Frame(bytes) => wire::decode_body(&bytes[4..]).ok(),
        _ => None,
    };
    stream.set_read_timeout(None)?;
    let mut direct = stream.try_clone()?;
    let client_id = match hello {
        Some(env) if env.key == ctl::HELLO && !env.sender_id.is_empty() => env.sender_id,
        _ => {
            if let Some(f) = shared.control_frame(
                ctl::ERROR,
                json!({"code": "protocol", "reason": "first frame must be _ctl/hello"}),
                max,
            ) {
                let _ = direct.write_all(&f);
            }
            return Ok(());
        }
    };

    let (tx, rx) = mpsc::channel::<Arc<Vec<u8>>>();
    {
        let mut clients = shared.clients.lock().unwrap();
        if clients.contains_key(&client_id) {
            drop(clients);
            warn!(client = %client_id, "duplicate client id rejected");
            if let Some(f) = shared.control_frame(
                ctl::ERROR,
                json!({"code": "duplicate-client-id", "reason": format!("client id `{client_id}` is already connected")}),
                max,
            ) {
                let _ = direct.write_all(&f);
            }
            return Ok(());
        }
        clients.insert(
            client_id.clone(),
            ClientEntry {
                conn_id,
                patterns: Vec::new(),
                tx: tx.clone(),
            },
        );
    }
    debug!(client = %client_id, "client connected");

    let mut writer_stream = stream.try_clone()?;
    let writer = thread::spawn(move || {
        for frame in rx {
            if writer_stream.write_all(&frame).is_err() {
                break;
            }
        }
    });
    if let Some(f) = shared.control_frame(ctl::WELCOME, json!({"client_id": client_id}), max) {
        let _ = tx.send(f);
    }

    let send_ctl = |key: &str, payload: Value| {
        if let Some(f) = shared.control_frame(key, payload, max) {
            let _ = tx.send(f);
        }
    };

    loop {
        let frame = match wire::read_raw_frame(&mut reader, max) {
            Ok(RawFrame::Frame(f)) => f,
            Ok(RawFrame::Oversize(size)) => {
                send_ctl(
                    ctl::ERROR,
                    json!({"code": "frame-too-large", "reason": format!("{size} bytes exceeds {max}")}),
                );
                continue;
            }
            Ok(RawFrame::Eof) | Err(_) => break,
        };
        let env = match wire::decode_body(&frame[4..]) {
            Ok(env) => env,
            Err(e) => {
                send_ctl(ctl::ERROR, json!({"code": "malformed", "reason": e.to_string()}));
                continue;
            }
        };
        if env.is_control() {
            handle_control(&env, &client_id, conn_id, shared, &send_ctl);
            continue;
        }
        let key = match KeyExpr::parse_literal(&env.key) {
            Ok(k) => k,
            Err(e) => {
                send_ctl(ctl::ERROR, json!({"code": "bad-key", "reason": e.to_string()}));
                continue;
            }
        };
        let frame = Arc::new(frame);
        let clients = shared.clients.lock().unwrap();
        for entry in clients.values() {
            if entry.patterns.iter().any(|p| p.matches(&key)) {
                let _ = entry.tx.send(Arc::clone(&frame));
            }
        }
    }

    {
        let mut clients = shared.clients.lock().unwrap();
        if clients.get(&client_id).map(|c| c.conn_id) == Some(conn_id) {
            clients.remove(&client_id);
        }
    }
    drop(tx);
    debug!(client = %client_id, "client disconnected");
    let _ = writer.join();
    Ok(())
}

fn handle_control(env: &Envelope, client_id: &str, conn_id: u64, shared: &Shared, send_ctl: &dyn Fn(&str, Value)) {
    let req = env.payload.get("req").cloned().unwrap_or(Value::Null);
    let field = match env.key.as_str() {
        ctl::SUBSCRIBE => "pattern",
        ctl::REMAP => "external",
        other => {
            send_ctl(
                ctl::ERROR,
                json!({"req": req, "code": "unknown-control", "reason": format!("unknown control key `{other}`")}),
            );
            return;
        }
    };
    let pattern = env
        .payload
        .get(field)
        .and_then(Value::as_str)
        .ok_or_else(|| format!("missing `{field}`"))
        .and_then(|p| KeyExpr::parse(p).map_err(|e| e.to_string()));
    match pattern {
        Ok(p) => {
            let mut clients = shared.clients.lock().unwrap();
            if let Some(entry) = clients.get_mut(client_id).filter(|c| c.conn_id == conn_id) {
                if !entry.patterns.contains(&p) {
                    entry.patterns.push(p);
                }
            }
            drop(clients);
            send_ctl(ctl::ACK, json!({"req": req}));
        }
        Err(reason) => send_ctl(ctl::ERROR, json!({"req": req, "code": "bad-pattern", "reason": reason})),
    }
}
