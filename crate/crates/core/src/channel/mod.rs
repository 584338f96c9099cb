//! Communication layer between master and follower: a deterministic
//! simulated delay line, a TCP transport, and the wire format both share.

pub mod sim;
pub mod transport;
pub mod wire;

use thiserror::Error;

pub use sim::{ChannelConfig, DeliveryRecord, Jitter, SimChannel};
pub use transport::{open_transport, Endpoint, Role, TransportListener, TransportOptions};
pub use wire::{deserialize, serialize, FeedbackMsg, Message, WireError, FRAME_LEN};

/// Environment variable overriding the tick rate (Hz).
pub const TICK_HZ_ENV: &str = "TELEOP_TICK_HZ";

/// Reads `TELEOP_TICK_HZ`, falling back to `default` when unset or invalid.
pub fn tick_hz_from_env(default: f64) -> f64 {
    std::env::var(TICK_HZ_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<f64>().ok())
        .filter(|v| v.is_finite() && *v > 0.0)
        .unwrap_or(default)
}

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("channel closed; delivery refused")]
    Closed,
    #[error("send tick {now} is earlier than previous send tick {last}")]
    NonMonotonic { last: u64, now: u64 },
    #[error("invalid channel config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("bind {address}: {source}")]
    Bind {
        address: String,
        source: std::io::Error,
    },
    #[error("connect {address}: {source}")]
    Connect {
        address: String,
        source: std::io::Error,
    },
    #[error("timed out waiting for peer at {address}")]
    Timeout { address: String },
    #[error("bad address {address}: {msg}")]
    Address { address: String, msg: String },
    #[error("framing error: expected {expected} bytes, got {got}")]
    Framing { expected: usize, got: usize },
    #[error("decode: {0}")]
    Decode(#[from] WireError),
    #[error("io: {0}")]
    Io(String),
    #[error("peer closed the connection")]
    Closed,
}
