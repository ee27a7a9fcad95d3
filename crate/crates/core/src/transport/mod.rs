//! Server-to-server messaging: synchronous requests and asynchronous
//! replicates with callbacks, over an in-process loopback or TCP.

mod dispatch;
pub mod loopback;
pub mod message;
pub mod tcp;

use std::sync::Arc;

use thiserror::Error;

pub use dispatch::{DeliveryPolicy, DispatchStats};
pub use message::{DecodeError, Message, OpKind};

use crate::node::ServerId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("server {0} is not part of the cluster")]
    UnknownServer(ServerId),
    #[error("server {0} is down")]
    Down(ServerId),
    #[error("i/o error talking to server {server}: {detail}")]
    Io { server: ServerId, detail: String },
    #[error("gave up after {0} attempts")]
    Exhausted(u32),
    #[error("malformed frame: {0}")]
    Decode(#[from] DecodeError),
}

/// Completion of an asynchronous replicate.
pub type Callback = Box<dyn FnOnce(Result<Message, TransportError>) + Send>;

/// Receive side: one per server.
pub trait Handler: Send + Sync {
    fn handle(&self, msg: Message) -> Message;
}

/// Send side as seen by one server.
pub trait Network: Send + Sync {
    fn me(&self) -> ServerId;
    fn servers(&self) -> Vec<ServerId>;
    /// Delivers `msg` and blocks until the matching response arrives.
    fn request(&self, dest: ServerId, msg: Message) -> Result<Message, TransportError>;
    /// Delivers `msg` without waiting; `done` runs on a callback thread.
    fn send_async(&self, dest: ServerId, msg: Message, done: Callback);
}

/// Number of delivery attempts for asynchronous replicates.
pub const REPLICATE_ATTEMPTS: u32 = 5;

pub type SharedNetwork = Arc<dyn Network>;
