//! Assembling servers: configuration, client routing, the maintenance
//! executor and balancer, and in-process clusters.

mod balancer;
mod cluster;
mod config;
mod server;

pub use balancer::TickReport;
pub use cluster::{bootstrap, Backend, Cluster, ClusterError, RunningServer};
pub use config::{ConfigError, ServerConfig, Tuning};
pub use server::{ClientError, Outcome, RuntimeStats, Server, HOP_BUCKETS, MAX_HOPS};
