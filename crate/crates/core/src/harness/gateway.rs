//! Websocket bridge for the operator panel: streams selected bus traffic to
//! each browser and forwards its commands onto the bus.

use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use avp_msgbus::{BusError, Session};
use serde_json::json;
use tracing::{debug, info, warn};
use tungstenite::{Message, WebSocket};

use crate::topics::{leaf, ns_key, validate_ns, CommandMsg, OCCUPANCY, POSES};

pub const STREAM_PATTERNS: &[&str] = &["avp/coord/**", POSES, OCCUPANCY, "avp/*/status"];
const POLL: Duration = Duration::from_millis(20);

/// Accepts ":8080" as shorthand for all interfaces.
pub fn parse_listen(listen: &str) -> anyhow::Result<SocketAddr> {
    let full = if listen.starts_with(':') {
        format!("0.0.0.0{listen}")
    } else {
        listen.to_string()
    };
    full.to_socket_addrs()?
        .next()
        .with_context(|| format!("cannot resolve listen address {listen}"))
}

/// Parses one inbound panel message; the error text is sent back verbatim.
pub fn parse_command(text: &str) -> Result<CommandMsg, String> {
    let cmd: CommandMsg = serde_json::from_str(text).map_err(|e| format!("malformed command: {e}"))?;
    validate_ns(&cmd.target_ns)?;
    Ok(cmd)
}

pub struct Gateway {
    listener: TcpListener,
    router: SocketAddr,
}

impl Gateway {
    pub fn bind(router: SocketAddr, listen: SocketAddr) -> anyhow::Result<Self> {
        let listener = TcpListener::bind(listen).with_context(|| format!("binding {listen}"))?;
        Ok(Self { listener, router })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener")
    }

    /// Serves clients forever, one thread each.
    pub fn run(self) -> anyhow::Result<()> {
        info!(addr = %self.local_addr(), router = %self.router, "gateway listening");
        let counter = Arc::new(AtomicU64::new(0));
        for stream in self.listener.incoming() {
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    warn!(error = %e, "accept failed");
                    continue;
                }
            };
            let id = counter.fetch_add(1, Ordering::Relaxed) + 1;
            let router = self.router;
            std::thread::spawn(move || {
                if let Err(e) = serve_client(stream, router, id) {
                    debug!(client = id, error = %e, "gateway client ended");
                }
            });
        }
        Ok(())
    }
}

fn serve_client(stream: TcpStream, router: SocketAddr, id: u64) -> anyhow::Result<()> {
    let peer = stream.peer_addr()?;
    let mut ws = tungstenite::accept(stream).map_err(|e| anyhow::anyhow!("handshake with {peer}: {e}"))?;
    ws.get_ref().set_read_timeout(Some(POLL))?;
    let session = Session::connect(router, &format!("gateway-{id}"))?;
    let sub = session.subscribe_many(STREAM_PATTERNS)?;
    info!(client = id, %peer, "panel connected");
    let result = pump(&mut ws, &session, &sub);
    session.close();
    result
}

fn send_json(ws: &mut WebSocket<TcpStream>, value: serde_json::Value) -> anyhow::Result<()> {
    ws.send(Message::Text(value.to_string()))?;
    Ok(())
}

fn pump(ws: &mut WebSocket<TcpStream>, session: &Session, sub: &avp_msgbus::Subscriber) -> anyhow::Result<()> {
    loop {
        loop {
            match sub.try_recv() {
                Ok(Some(env)) => send_json(ws, serde_json::to_value(&env)?)?,
                Ok(None) => break,
                Err(BusError::Closed) => return Ok(()),
                Err(e) => return Err(e.into()),
            }
        }
        match ws.read() {
            Ok(Message::Text(text)) => match parse_command(&text) {
                Ok(cmd) => {
                    let key = ns_key(&cmd.target_ns, leaf::CMD);
                    session.publish(&key, serde_json::to_value(&cmd)?)?;
                    send_json(ws, json!({"published": key}))?;
                }
                Err(reason) => send_json(ws, json!({"error": reason}))?,
            },
            Ok(Message::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
            Err(e) => return Err(e.into()),
        }
    }
}
