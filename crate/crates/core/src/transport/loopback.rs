//! In-process cluster transport. Requests run the destination handler on the
//! caller's thread after a seeded delay; replicates go through the shared
//! delivery queue. Every message is passed through the wire codec.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering::SeqCst};
use std::sync::{Arc, OnceLock, Weak};
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dispatch::{DeliveryPolicy, DispatchStats, Dispatcher};
use super::{Callback, Handler, Message, Network, TransportError};
use crate::node::ServerId;

struct Inner {
    handlers: RwLock<HashMap<ServerId, Arc<dyn Handler>>>,
    down: RwLock<HashSet<ServerId>>,
    policy: DeliveryPolicy,
    rng: Mutex<ChaCha8Rng>,
    next_id: AtomicU64,
    requests: AtomicU64,
    dispatcher: OnceLock<Dispatcher>,
}

impl Inner {
    fn deliver(&self, dest: ServerId, msg: Message) -> Result<Message, TransportError> {
        if self.down.read().contains(&dest) {
            return Err(TransportError::Down(dest));
        }
        let handler = self.handlers.read().get(&dest).cloned().ok_or(TransportError::UnknownServer(dest))?;
        let id = self.next_id.fetch_add(1, SeqCst);
        let (rid, req) = Message::decode(&msg.encode(id))?;
        debug_assert_eq!((rid, req), (id, msg));
        let resp = handler.handle(req);
        let (_, resp) = Message::decode(&resp.encode(id))?;
        Ok(resp)
    }
}

/// A loopback cluster fabric shared by all servers in the process.
#[derive(Clone)]
pub struct LoopbackNet {
    inner: Arc<Inner>,
}

impl LoopbackNet {
    pub fn new(policy: DeliveryPolicy) -> LoopbackNet {
        let inner = Arc::new(Inner {
            handlers: RwLock::new(HashMap::new()),
            down: RwLock::new(HashSet::new()),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(policy.seed ^ 0x5eed)),
            policy: policy.clone(),
            next_id: AtomicU64::new(1),
            requests: AtomicU64::new(0),
            dispatcher: OnceLock::new(),
        });
        let weak: Weak<Inner> = Arc::downgrade(&inner);
        let dispatcher = Dispatcher::new(
            policy,
            Box::new(move |dest, msg| match weak.upgrade() {
                Some(inner) => inner.deliver(dest, msg),
                None => Err(TransportError::Down(dest)),
            }),
        );
        let _ = inner.dispatcher.set(dispatcher);
        LoopbackNet { inner }
    }

    pub fn register(&self, id: ServerId, handler: Arc<dyn Handler>) {
        self.inner.handlers.write().insert(id, handler);
    }

    /// The send side for server `me`.
    pub fn endpoint(&self, me: ServerId) -> Arc<dyn Network> {
        Arc::new(Endpoint { me, net: self.clone() })
    }

    pub fn servers(&self) -> Vec<ServerId> {
        let mut ids: Vec<_> = self.inner.handlers.read().keys().copied().collect();
        ids.sort_unstable();
        ids
    }

    /// Makes requests and deliveries to `id` fail until brought back up.
    pub fn set_down(&self, id: ServerId, down: bool) {
        if down {
            self.inner.down.write().insert(id);
        } else {
            self.inner.down.write().remove(&id);
        }
    }

    pub fn hold(&self, dest: ServerId) {
        self.dispatcher().hold(dest)
    }

    pub fn release(&self, dest: ServerId) {
        self.dispatcher().release(dest)
    }

    pub fn duplicate_next(&self, n: u32) {
        self.dispatcher().duplicate_next(n)
    }

    pub fn delivery_log(&self) -> Vec<(u64, ServerId)> {
        self.dispatcher().delivery_log()
    }

    pub fn async_stats(&self) -> DispatchStats {
        self.dispatcher().stats()
    }

    pub fn requests_served(&self) -> u64 {
        self.inner.requests.load(SeqCst)
    }

    /// Waits until all asynchronous messages and callbacks have completed.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        self.dispatcher().wait_idle(timeout)
    }

    /// Stops delivery threads and drops the handler table.
    pub fn shutdown(&self) {
        self.dispatcher().shutdown();
        self.inner.handlers.write().clear();
    }

    fn dispatcher(&self) -> &Dispatcher {
        self.inner.dispatcher.get().expect("dispatcher initialised in new")
    }

    fn request(&self, dest: ServerId, msg: Message) -> Result<Message, TransportError> {
        let p = &self.inner.policy;
        if p.max_delay > Duration::ZERO {
            let delay = p.sample_delay(&mut self.inner.rng.lock());
            if !delay.is_zero() {
                std::thread::sleep(delay);
            }
        }
        self.inner.requests.fetch_add(1, SeqCst);
        self.inner.deliver(dest, msg)
    }
}

struct Endpoint {
    me: ServerId,
    net: LoopbackNet,
}

impl Network for Endpoint {
    fn me(&self) -> ServerId {
        self.me
    }

    fn servers(&self) -> Vec<ServerId> {
        self.net.servers()
    }

    fn request(&self, dest: ServerId, msg: Message) -> Result<Message, TransportError> {
        self.net.request(dest, msg)
    }

    fn send_async(&self, dest: ServerId, msg: Message, done: Callback) {
        self.net.dispatcher().submit(dest, msg, done)
    }
}
