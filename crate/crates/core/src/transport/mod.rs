//! Message delivery between nodes.
//!
//! Two backends share the [`Transport`] / [`Inbox`] interface: an in-process
//! simulated network with per-link latency, bandwidth, jitter and loss
//! ([`sim`]), and length-prefixed frames over TCP ([`socket`]).

pub mod golden;
pub mod sim;
pub mod socket;
pub mod wire;

use thiserror::Error;

use crate::blackboard::Address;
pub use wire::{decode_message, encode_message, Message, Ping, Pong, WireError};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("unknown address {0}")]
    UnknownAddress(Address),
    #[error("address {0} already attached")]
    AddressInUse(Address),
    #[error("connecting to {0}: {1}")]
    ConnectFailed(Address, std::io::Error),
    #[error("writing to {0}: {1}")]
    WriteFailed(Address, std::io::Error),
    #[error("binding {0}: {1}")]
    BindFailed(String, std::io::Error),
    #[error("invalid link model: {0}")]
    InvalidLink(String),
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// Receives raw frames addressed to one node. A returned message is sent
/// back to the given address by the transport.
pub trait Inbox: Send + Sync {
    fn deliver(&self, bytes: &[u8]) -> Option<(Address, Message)>;
}

pub trait Transport: Send + Sync {
    fn local_address(&self) -> &Address;

    /// Queues `msg` for delivery. Never blocks on the remote side; delivery
    /// failures after queueing are silent (the scheduler times out).
    fn send(&self, to: &Address, msg: &Message) -> Result<(), TransportError>;
}
