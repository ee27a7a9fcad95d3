//! One server: client routing with hop counting, load gossip and the
//! maintenance executor.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering::SeqCst};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam::channel::{self, Sender};
use parking_lot::{Condvar, Mutex};
use thiserror::Error;

use super::config::Tuning;
use crate::node::{Key, NodeRef, ServerId};
use crate::shard::Shard;
use crate::sublist::{OpError, OpResult};
use crate::transport::message::code;
use crate::transport::{Handler, Message, OpKind, TransportError};

/// Most servers a client operation may visit, the entry server included.
pub const MAX_HOPS: u8 = 3;

/// Histogram buckets: hop counts 1..=MAX_HOPS plus one overflow bucket.
pub const HOP_BUCKETS: usize = MAX_HOPS as usize + 2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClientError {
    #[error(transparent)]
    Op(#[from] OpError),
    #[error("operation on key {key} would visit a {hops}th server")]
    HopLimit { key: Key, hops: u8 },
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("server {server} answered with error code {code}")]
    Remote { server: ServerId, code: i64 },
}

/// Result of a client operation and the number of servers it visited.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Outcome {
    pub value: bool,
    pub hops: u8,
}

/// Counting semaphore bounding concurrent client operations.
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Permits {
    fn new(n: usize) -> Permits {
        Permits { free: Mutex::new(n), cv: Condvar::new() }
    }

    fn acquire(&self) -> PermitGuard<'_> {
        let mut free = self.free.lock();
        while *free == 0 {
            self.cv.wait(&mut free);
        }
        *free -= 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock() += 1;
        self.0.cv.notify_one();
    }
}

type Task = Box<dyn FnOnce(&Server) + Send>;

#[derive(Default, Debug)]
pub struct RuntimeStats {
    pub hops: [AtomicU64; HOP_BUCKETS],
    pub hop_breaches: AtomicU64,
    pub client_errors: AtomicU64,
    pub gossip_rounds: AtomicU64,
}

impl RuntimeStats {
    pub fn hop_histogram(&self) -> [u64; HOP_BUCKETS] {
        std::array::from_fn(|i| self.hops[i].load(SeqCst))
    }
}

pub struct Server {
    shard: Arc<Shard>,
    pub(crate) tuning: Tuning,
    permits: Permits,
    pub(crate) peer_loads: Mutex<HashMap<ServerId, i64>>,
    pub stats: RuntimeStats,
    tasks: Mutex<Option<Sender<Task>>>,
    executor: Mutex<Option<JoinHandle<()>>>,
    balancer: Mutex<Option<JoinHandle<()>>>,
    balancer_stop: Arc<AtomicBool>,
    pub(crate) background_times: Mutex<Vec<(&'static str, Duration)>>,
}

impl Server {
    /// Wraps a bootstrapped shard and starts its maintenance executor.
    pub fn start(shard: Arc<Shard>, tuning: Tuning) -> Arc<Server> {
        let (tx, rx) = channel::unbounded::<Task>();
        let server = Arc::new(Server {
            permits: Permits::new(tuning.workers),
            shard,
            tuning,
            peer_loads: Mutex::new(HashMap::new()),
            stats: RuntimeStats::default(),
            tasks: Mutex::new(Some(tx)),
            executor: Mutex::new(None),
            balancer: Mutex::new(None),
            balancer_stop: Arc::new(AtomicBool::new(false)),
            background_times: Mutex::new(Vec::new()),
        });
        let weak = Arc::downgrade(&server);
        let handle = thread::Builder::new()
            .name(format!("maint-{}", server.id()))
            .spawn(move || {
                while let Ok(task) = rx.recv() {
                    match weak.upgrade() {
                        Some(s) => task(&s),
                        None => return,
                    }
                }
            })
            .expect("spawn maintenance executor");
        *server.executor.lock() = Some(handle);
        server
    }

    pub fn id(&self) -> ServerId {
        self.shard.id()
    }

    pub fn shard(&self) -> &Arc<Shard> {
        &self.shard
    }

    pub fn tuning(&self) -> &Tuning {
        &self.tuning
    }

    /// Runs a client operation that entered the cluster at this server.
    pub fn execute(&self, kind: OpKind, key: Key) -> Result<Outcome, ClientError> {
        let r = self.serve(kind, key, NodeRef::NULL, 1);
        match &r {
            Ok(o) => {
                let b = (o.hops as usize).clamp(1, HOP_BUCKETS - 1) - 1;
                self.stats.hops[b].fetch_add(1, SeqCst);
            }
            Err(ClientError::HopLimit { .. }) => {
                self.stats.hops[HOP_BUCKETS - 1].fetch_add(1, SeqCst);
                self.stats.client_errors.fetch_add(1, SeqCst);
            }
            Err(_) => {
                self.stats.client_errors.fetch_add(1, SeqCst);
            }
        }
        r
    }

    pub fn find(&self, key: Key) -> Result<bool, ClientError> {
        self.execute(OpKind::Find, key).map(|o| o.value)
    }

    pub fn insert(&self, key: Key) -> Result<bool, ClientError> {
        self.execute(OpKind::Insert, key).map(|o| o.value)
    }

    pub fn remove(&self, key: Key) -> Result<bool, ClientError> {
        self.execute(OpKind::Remove, key).map(|o| o.value)
    }

    /// Executes locally as far as possible, then forwards. `hops` counts
    /// this server.
    fn serve(&self, kind: OpKind, key: Key, subhead: NodeRef, hops: u8) -> Result<Outcome, ClientError> {
        let first = {
            let _permit = self.permits.acquire();
            self.shard.client_op(kind, key, subhead)?
        };
        self.settle(first, kind, key, hops)
    }

    fn serve_delete(&self, node: NodeRef, key: Key, hops: u8) -> Result<Outcome, ClientError> {
        let first = {
            let _permit = self.permits.acquire();
            self.shard.delete_at(node, key)?
        };
        self.settle(first, OpKind::Remove, key, hops)
    }

    fn settle(&self, mut res: OpResult, kind: OpKind, key: Key, hops: u8) -> Result<Outcome, ClientError> {
        loop {
            let (dest, msg) = match res {
                OpResult::Done(value) => return Ok(Outcome { value, hops }),
                OpResult::Delegate { server, subhead } => {
                    (server, Message::Client { kind, key, subhead, hops: hops + 1 })
                }
                OpResult::DelegateDelete { server, node } => (server, Message::DeleteAt { node, key, hops: hops + 1 }),
            };
            if dest == self.id() {
                // stale local hint; resolve again without leaving the server
                let _permit = self.permits.acquire();
                res = self.shard.client_op(kind, key, NodeRef::NULL)?;
                continue;
            }
            if hops + 1 > MAX_HOPS {
                self.stats.hop_breaches.fetch_add(1, SeqCst);
                log::error!("event=hop_breach server={} key={key} hops={}", self.id(), hops + 1);
                return Err(ClientError::HopLimit { key, hops: hops + 1 });
            }
            return match self.shard.network().expect("network attached").request(dest, msg)? {
                Message::BoolResp { value, hops } => Ok(Outcome { value, hops }),
                Message::Ack { ok: false, value: code::HOP_LIMIT } => Err(ClientError::HopLimit { key, hops: hops + 2 }),
                Message::Ack { ok: false, value } => Err(ClientError::Remote { server: dest, code: value }),
                _ => Err(ClientError::Remote { server: dest, code: code::BAD_REQUEST }),
            };
        }
    }

    /// Queues maintenance work; it runs on this server's executor thread.
    pub fn submit(&self, task: impl FnOnce(&Server) + Send + 'static) -> bool {
        match &*self.tasks.lock() {
            Some(tx) => tx.send(Box::new(task)).is_ok(),
            None => false,
        }
    }

    /// Runs `f` on the executor and waits for its result.
    pub fn run_maintenance<T: Send + 'static>(&self, f: impl FnOnce(&Server) -> T + Send + 'static) -> Option<T> {
        let (tx, rx) = channel::bounded(1);
        if !self.submit(move |s| {
            let _ = tx.send(f(s));
        }) {
            return None;
        }
        rx.recv().ok()
    }

    pub(crate) fn record_background(&self, what: &'static str, took: Duration) {
        self.background_times.lock().push((what, took));
    }

    /// Per-operation latencies of completed splits and moves.
    pub fn background_latencies(&self) -> Vec<(&'static str, Duration)> {
        self.background_times.lock().clone()
    }

    /// Starts the periodic balancer if the tuning asks for one.
    pub fn start_balancer(self: &Arc<Self>) {
        let period = self.tuning.balancer_period_ms;
        if period == 0 || self.balancer.lock().is_some() {
            return;
        }
        let weak = Arc::downgrade(self);
        let stop = Arc::clone(&self.balancer_stop);
        let pending = Arc::new(AtomicBool::new(false));
        let handle = thread::Builder::new()
            .name(format!("balancer-{}", self.id()))
            .spawn(move || {
                while !stop.load(SeqCst) {
                    thread::sleep(Duration::from_millis(period));
                    let Some(s) = weak.upgrade() else { return };
                    if pending.swap(true, SeqCst) {
                        continue;
                    }
                    let p = Arc::clone(&pending);
                    s.submit(move |s| {
                        let r = s.balancer_tick();
                        if r.acted() {
                            log::info!("event=balancer_tick server={} {r}", s.id());
                        }
                        p.store(false, SeqCst);
                    });
                }
            })
            .expect("spawn balancer");
        *self.balancer.lock() = Some(handle);
    }

    pub fn stop_balancer(&self) {
        self.balancer_stop.store(true, SeqCst);
        if let Some(h) = self.balancer.lock().take() {
            let _ = h.join();
        }
    }

    /// Stops the balancer, cancels background spins and joins the executor.
    pub fn shutdown(&self) {
        self.stop_balancer();
        self.shard.cancel_background();
        self.tasks.lock().take();
        if let Some(h) = self.executor.lock().take() {
            if h.thread().id() != thread::current().id() {
                let _ = h.join();
            }
        }
    }

    fn gossip_recv(&self, value: i64) -> Message {
        let (from, load) = unpack_gossip(value);
        self.peer_loads.lock().insert(from, load);
        Message::Ack { ok: true, value: self.shard.load_estimate() }
    }
}

impl Handler for Server {
    fn handle(&self, msg: Message) -> Message {
        let served = match msg {
            Message::Client { kind, key, subhead, hops } => self.serve(kind, key, subhead, hops),
            Message::DeleteAt { node, key, hops } => self.serve_delete(node, key, hops),
            Message::Ack { ok: true, value } => return self.gossip_recv(value),
            other => return self.shard.handle_background(other),
        };
        match served {
            Ok(Outcome { value, hops }) => Message::BoolResp { value, hops },
            Err(ClientError::HopLimit { .. }) => Message::error(code::HOP_LIMIT),
            Err(ClientError::Op(OpError::Exhausted(_))) => Message::error(code::EXHAUSTED),
            Err(ClientError::Op(OpError::ReservedKey(_))) => Message::error(code::BAD_REQUEST),
            Err(ClientError::Remote { code, .. }) => Message::error(code),
            Err(ClientError::Transport(_)) => Message::error(code::UNAVAILABLE),
        }
    }
}

/// Load gossip rides on an Ack request: sender id in the top 16 bits, load
/// in the rest.
pub(crate) fn pack_gossip(from: ServerId, load: i64) -> i64 {
    ((from as i64) << 47) | load.clamp(0, (1 << 47) - 1)
}

fn unpack_gossip(value: i64) -> (ServerId, i64) {
    ((value >> 47) as ServerId, value & ((1 << 47) - 1))
}
