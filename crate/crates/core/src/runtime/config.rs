//! Server configuration, loaded from TOML.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::node::{Key, ServerId};
use crate::shard::{even_partition, PartitionRange};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

/// Configuration of one server. Every server of a cluster must be given the
/// same `peers` table and `key_range`; the initial partition is derived
/// from them deterministically.
#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    pub server_id: ServerId,
    pub listen_addr: SocketAddr,
    /// Every server of the cluster, this one included.
    pub peers: BTreeMap<ServerId, SocketAddr>,
    /// Client key span `[lo, hi)` cut evenly among the peers, in id order.
    /// The outermost ranges extend to the sentinels.
    #[serde(default = "default_range")]
    pub key_range: (Key, Key),
    #[serde(default = "default_arena")]
    pub arena_capacity: u64,
    #[serde(default = "default_split")]
    pub split_threshold: i64,
    #[serde(default = "default_ratio")]
    pub move_trigger_ratio: f64,
    /// 0 disables the periodic balancer.
    #[serde(default = "default_period")]
    pub balancer_period_ms: u64,
    /// Concurrent client operations admitted by this server.
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_range() -> (Key, Key) {
    (0, 1 << 32)
}
fn default_arena() -> u64 {
    1 << 22
}
fn default_split() -> i64 {
    125
}
fn default_ratio() -> f64 {
    1.10
}
fn default_period() -> u64 {
    100
}
fn default_workers() -> usize {
    4
}

/// Knobs shared by servers built in-process (tests, benches).
#[derive(Clone, Debug, PartialEq)]
pub struct Tuning {
    pub arena_capacity: u64,
    pub split_threshold: i64,
    pub move_trigger_ratio: f64,
    pub balancer_period_ms: u64,
    pub workers: usize,
    /// A sublist that arrived more recently than this is not moved again.
    pub move_cooldown_ms: u64,
}

impl Default for Tuning {
    fn default() -> Self {
        Tuning {
            arena_capacity: default_arena(),
            split_threshold: default_split(),
            move_trigger_ratio: default_ratio(),
            balancer_period_ms: default_period(),
            workers: default_workers(),
            move_cooldown_ms: 50,
        }
    }
}

impl ServerConfig {
    pub fn from_toml(text: &str) -> Result<ServerConfig, ConfigError> {
        let cfg: ServerConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ServerConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match self.peers.get(&self.server_id) {
            None => return Err(invalid(format!("server_id {} missing from peers", self.server_id))),
            Some(a) if *a != self.listen_addr => {
                return Err(invalid(format!("listen_addr {} differs from peers entry {a}", self.listen_addr)))
            }
            _ => {}
        }
        if self.peers.keys().any(|&id| id == ServerId::MAX) {
            return Err(invalid("server id 65535 is reserved"));
        }
        let (lo, hi) = self.key_range;
        if lo >= hi || (hi as i128 - lo as i128) < self.peers.len() as i128 {
            return Err(invalid("key_range must hold at least one key per server"));
        }
        if lo == Key::MIN || hi == Key::MAX {
            return Err(invalid("key_range must not touch the sentinel keys"));
        }
        if self.split_threshold < 8 {
            return Err(invalid("split_threshold must be at least 8"));
        }
        if self.move_trigger_ratio.is_nan() || self.move_trigger_ratio < 1.0 {
            return Err(invalid("move_trigger_ratio must be at least 1.0"));
        }
        if self.workers == 0 {
            return Err(invalid("workers must be positive"));
        }
        if self.arena_capacity < 64 || self.arena_capacity >= 1 << 47 {
            return Err(invalid("arena_capacity out of range"));
        }
        Ok(())
    }

    pub fn partition(&self) -> Vec<PartitionRange> {
        let ids: Vec<ServerId> = self.peers.keys().copied().collect();
        even_partition(&ids, self.key_range.0, self.key_range.1)
    }

    pub fn tuning(&self) -> Tuning {
        Tuning {
            arena_capacity: self.arena_capacity,
            split_threshold: self.split_threshold,
            move_trigger_ratio: self.move_trigger_ratio,
            balancer_period_ms: self.balancer_period_ms,
            workers: self.workers,
            ..Tuning::default()
        }
    }
}
