//! Building whole clusters in one process (loopback or TCP on localhost)
//! and bootstrapping a single networked server from its config.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use super::config::{ServerConfig, Tuning};
use super::server::{ClientError, Outcome, Server};
use crate::node::{Key, ServerId};
use crate::shard::{even_partition, BootstrapError, Shard};
use crate::transport::loopback::LoopbackNet;
use crate::transport::tcp::{TcpNet, TcpServer};
use crate::transport::{DeliveryPolicy, OpKind};

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error(transparent)]
    Bootstrap(#[from] BootstrapError),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("a cluster needs between 1 and 1024 servers")]
    Size,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backend {
    Loopback,
    Tcp,
}

enum Wiring {
    Loopback(LoopbackNet),
    Tcp { listeners: Vec<TcpServer>, nets: Vec<TcpNet> },
}

/// A set of servers sharing one initial partition.
pub struct Cluster {
    pub servers: Vec<Arc<Server>>,
    wiring: Wiring,
}

fn shard_for(id: ServerId, ids: &[ServerId], range: (Key, Key), tuning: &Tuning) -> Result<Arc<Shard>, ClusterError> {
    let shard = Shard::new(id, tuning.arena_capacity);
    shard.install_partition(&even_partition(ids, range.0, range.1))?;
    Ok(shard)
}

impl Cluster {
    /// `n` servers over the in-process network. Client keys in
    /// `[range.0, range.1)` start evenly spread.
    pub fn loopback(n: usize, range: (Key, Key), tuning: Tuning, policy: DeliveryPolicy) -> Result<Cluster, ClusterError> {
        if n == 0 || n > 1024 {
            return Err(ClusterError::Size);
        }
        let ids: Vec<ServerId> = (0..n as ServerId).collect();
        let net = LoopbackNet::new(policy);
        let mut servers = Vec::with_capacity(n);
        for &id in &ids {
            let shard = shard_for(id, &ids, range, &tuning)?;
            shard.attach_network(net.endpoint(id));
            let server = Server::start(shard, tuning.clone());
            net.register(id, Arc::clone(&server) as _);
            servers.push(server);
        }
        Ok(Cluster { servers, wiring: Wiring::Loopback(net) })
    }

    /// `n` servers talking TCP over 127.0.0.1 on ephemeral ports.
    pub fn tcp(n: usize, range: (Key, Key), tuning: Tuning) -> Result<Cluster, ClusterError> {
        if n == 0 || n > 1024 {
            return Err(ClusterError::Size);
        }
        let ids: Vec<ServerId> = (0..n as ServerId).collect();
        let mut servers = Vec::with_capacity(n);
        let mut listeners = Vec::with_capacity(n);
        let any: SocketAddr = "127.0.0.1:0".parse().expect("literal address");
        for &id in &ids {
            let shard = shard_for(id, &ids, range, &tuning)?;
            let server = Server::start(shard, tuning.clone());
            let l = TcpServer::bind(any, Arc::clone(&server) as _, tuning.workers)
                .map_err(|source| ClusterError::Bind { addr: any, source })?;
            listeners.push(l);
            servers.push(server);
        }
        let peers: HashMap<ServerId, SocketAddr> = ids.iter().map(|&id| (id, listeners[id as usize].local_addr())).collect();
        let mut nets = Vec::with_capacity(n);
        for s in &servers {
            let net = TcpNet::new(s.id(), peers.clone(), DeliveryPolicy::default());
            s.shard().attach_network(Arc::new(net.clone()));
            nets.push(net);
        }
        Ok(Cluster { servers, wiring: Wiring::Tcp { listeners, nets } })
    }

    pub fn build(backend: Backend, n: usize, range: (Key, Key), tuning: Tuning) -> Result<Cluster, ClusterError> {
        match backend {
            Backend::Loopback => Cluster::loopback(n, range, tuning, DeliveryPolicy::default()),
            Backend::Tcp => Cluster::tcp(n, range, tuning),
        }
    }

    pub fn len(&self) -> usize {
        self.servers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.servers.is_empty()
    }

    pub fn server(&self, i: usize) -> &Arc<Server> {
        &self.servers[i]
    }

    /// Runs a client operation entering at server `at`.
    pub fn execute(&self, at: usize, kind: OpKind, key: Key) -> Result<Outcome, ClientError> {
        self.servers[at].execute(kind, key)
    }

    /// The loopback network, for fault injection in tests.
    pub fn loopback_net(&self) -> Option<&LoopbackNet> {
        match &self.wiring {
            Wiring::Loopback(n) => Some(n),
            Wiring::Tcp { .. } => None,
        }
    }

    pub fn start_balancers(&self) {
        self.servers.iter().for_each(|s| s.start_balancer());
    }

    pub fn stop_balancers(&self) {
        self.servers.iter().for_each(|s| s.stop_balancer());
    }

    /// Runs one balancer tick on every server, in id order, on their
    /// executors. Returns the summed report.
    pub fn tick_all(&self) -> super::balancer::TickReport {
        let mut total = super::balancer::TickReport::default();
        for s in &self.servers {
            if let Some(r) = s.run_maintenance(|s| s.balancer_tick()) {
                total.splits += r.splits;
                total.failed_splits += r.failed_splits;
                total.moves += r.moves;
                total.failed_moves += r.failed_moves;
            }
        }
        total
    }

    /// Waits for outstanding replicates to drain.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        match &self.wiring {
            Wiring::Loopback(n) => n.wait_idle(timeout),
            Wiring::Tcp { nets, .. } => nets.iter().all(|n| n.wait_idle(timeout)),
        }
    }

    pub fn shutdown(&self) {
        self.stop_balancers();
        let _ = self.wait_idle(Duration::from_secs(10));
        self.servers.iter().for_each(|s| s.shutdown());
        match &self.wiring {
            Wiring::Loopback(n) => n.shutdown(),
            Wiring::Tcp { listeners, nets } => {
                nets.iter().for_each(TcpNet::shutdown);
                listeners.iter().for_each(TcpServer::shutdown);
            }
        }
    }
}

/// A single server started from its config file, serving over TCP.
pub struct RunningServer {
    pub server: Arc<Server>,
    listener: TcpServer,
    net: TcpNet,
}

impl RunningServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr()
    }

    pub fn shutdown(&self) {
        self.server.stop_balancer();
        let _ = self.net.wait_idle(Duration::from_secs(10));
        self.server.shutdown();
        self.net.shutdown();
        self.listener.shutdown();
    }
}

/// Builds this server's sublists and registry from the config, starts
/// listening and starts the balancer.
pub fn bootstrap(cfg: &ServerConfig) -> Result<RunningServer, ClusterError> {
    cfg.validate().map_err(|e| ClusterError::Bootstrap(BootstrapError::Config(e.to_string())))?;
    let tuning = cfg.tuning();
    let shard = Shard::new(cfg.server_id, tuning.arena_capacity);
    shard.install_partition(&cfg.partition())?;
    let server = Server::start(shard, tuning.clone());
    let listener = TcpServer::bind(cfg.listen_addr, Arc::clone(&server) as _, tuning.workers)
        .map_err(|source| ClusterError::Bind { addr: cfg.listen_addr, source })?;
    let peers: HashMap<_, _> = cfg.peers.iter().map(|(k, v)| (*k, *v)).collect();
    let net = TcpNet::new(cfg.server_id, peers, DeliveryPolicy { seed: cfg.seed, ..DeliveryPolicy::default() });
    server.shard().attach_network(Arc::new(net.clone()));
    server.start_balancer();
    log::info!("event=serving server={} addr={}", cfg.server_id, listener.local_addr());
    Ok(RunningServer { server, listener, net })
}
