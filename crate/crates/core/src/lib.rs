pub mod node;
pub mod rdcss;
pub mod runtime;
pub mod registry;
pub mod background;
pub mod shard;
pub mod sublist;
pub mod transport;
pub mod verify;

pub use node::{Key, NodeRef, ServerId};
pub use registry::{Entry, Registry};
pub use runtime::{Backend, Cluster, ClientError, Outcome, ServerConfig, Tuning};
pub use transport::OpKind;
