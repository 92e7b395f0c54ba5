//! Namespaced key-based publish/subscribe transport.
//!
//! Clients connect to a single [`Router`] over TCP and exchange
//! length-prefixed JSON [`Envelope`]s. Subscriptions are [`KeyExpr`]
//! patterns where `*` matches one segment and `**` matches zero or more.

pub mod envelope;
pub mod error;
pub mod keyexpr;
pub mod router;
pub mod rtt;
pub mod session;
pub mod wire;

pub use envelope::{now_ns, Envelope};
pub use error::BusError;
pub use keyexpr::{key_matches, KeyExpr, KeyExprError, RemapRule, Segment};
pub use router::{Router, RouterConfig, RouterHandle};
pub use rtt::{rtt_probe, rtt_probe_with, spawn_echo_responder, ProbeOptions, RttStats};
pub use session::{Session, SessionConfig, Subscriber};
pub use wire::DEFAULT_MAX_FRAME_BYTES;
