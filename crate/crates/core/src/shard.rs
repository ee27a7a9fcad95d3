//! State of one server: arena, clock, registry, fault switches and counters.

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering::SeqCst};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use parking_lot::{Mutex, RwLock};
use rand::Rng;
use thiserror::Error;

use crate::node::{Arena, Clock, Key, Node, NodeInit, NodeRef, ServerId, SH_KEY, ST_KEY};
use crate::registry::{Entry, Registry, RegistryError, MAX_SUBLISTS};
use crate::transport::SharedNetwork;

/// Places where the chaos hook may yield or block a thread.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ChaosPoint {
    AfterSearch,
    AfterStartCount,
    BeforeLinkCas,
    MoveStep,
    BeforeFreeze,
}

pub type ChaosHook = Arc<dyn Fn(ServerId, ChaosPoint) + Send + Sync>;

/// Test-only behaviour switches. All default to off.
#[derive(Default)]
pub struct Faults {
    /// Delete marks a node even when it is already marked.
    pub skip_delete_mark_check: AtomicBool,
    /// Insert ignores a frozen start counter.
    pub skip_insert_freeze_check: AtomicBool,
    jitter_permille: AtomicU32,
    hook_set: AtomicBool,
    hook: RwLock<Option<ChaosHook>>,
}

impl Faults {
    /// Probability (per mille) of yielding at each chaos point.
    pub fn set_jitter(&self, permille: u32) {
        self.jitter_permille.store(permille.min(1000), SeqCst)
    }

    pub fn set_hook(&self, hook: Option<ChaosHook>) {
        self.hook_set.store(hook.is_some(), SeqCst);
        *self.hook.write() = hook;
    }

    pub(crate) fn chaos(&self, server: ServerId, point: ChaosPoint) {
        let p = self.jitter_permille.load(SeqCst);
        if p > 0 && rand::rng().random_range(0..1000) < p {
            for _ in 0..rand::rng().random_range(1..4) {
                std::thread::yield_now();
            }
        }
        if self.hook_set.load(SeqCst) {
            let hook = self.hook.read().clone();
            if let Some(h) = hook {
                h(server, point);
            }
        }
    }

    pub(crate) fn skip_mark_check(&self) -> bool {
        self.skip_delete_mark_check.load(SeqCst)
    }

    pub(crate) fn skip_freeze_check(&self) -> bool {
        self.skip_insert_freeze_check.load(SeqCst)
    }
}

/// Monotone event counters, read by monitors and reports.
#[derive(Default, Debug)]
pub struct Stats {
    pub search_restarts: AtomicU64,
    pub delinks: AtomicU64,
    pub red_hops: AtomicU64,
    pub blue_reroutes: AtomicU64,
    pub sign_violations: AtomicU64,
    pub replicates_sent: AtomicU64,
    pub replicate_failures: AtomicU64,
    pub splits: AtomicU64,
    pub failed_splits: AtomicU64,
    pub moves: AtomicU64,
    pub aborted_moves: AtomicU64,
    pub merges: AtomicU64,
    pub freeze_attempts: AtomicU64,
    pub offset_spins: AtomicU64,
    pub maintenance_waits: AtomicU64,
    pub drain_waits: AtomicU64,
}

impl Stats {
    pub(crate) fn bump(c: &AtomicU64) {
        c.fetch_add(1, SeqCst);
    }

    pub fn get(c: &AtomicU64) -> u64 {
        c.load(SeqCst)
    }
}

thread_local! {
    static CLIENT_THREAD: Cell<bool> = const { Cell::new(false) };
}

/// Marks the current thread as running client operations; used to assert
/// that client paths never wait on maintenance work.
pub fn set_client_thread(on: bool) {
    CLIENT_THREAD.with(|c| c.set(on));
}

pub fn is_client_thread() -> bool {
    CLIENT_THREAD.with(|c| c.get())
}

/// One range of the initial partition map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PartitionRange {
    pub key_min: Key,
    pub key_max: Key,
    pub owner: ServerId,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BootstrapError {
    #[error("partition map is empty")]
    Empty,
    #[error("partition map does not tile the key domain at {0}")]
    Gap(Key),
    #[error("server {0} owns more than one initial range")]
    MultipleRanges(ServerId),
    #[error("shard was already bootstrapped")]
    NotFresh,
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

/// Subhead of the initial sublist owned by `owner`.
pub fn initial_subhead(owner: ServerId) -> NodeRef {
    NodeRef::pack(owner, 1, false)
}

/// Subtail of the initial sublist owned by `owner`.
pub fn initial_subtail(owner: ServerId) -> NodeRef {
    NodeRef::pack(owner, 2, false)
}

/// Checks that `map` tiles the whole key domain with at most one range per
/// server.
pub fn validate_partition(map: &[PartitionRange]) -> Result<(), BootstrapError> {
    let first = map.first().ok_or(BootstrapError::Empty)?;
    if first.key_min != SH_KEY {
        return Err(BootstrapError::Gap(first.key_min));
    }
    for w in map.windows(2) {
        if w[0].key_max != w[1].key_min || w[0].key_min >= w[0].key_max {
            return Err(BootstrapError::Gap(w[0].key_max));
        }
    }
    let last = map.last().unwrap();
    if last.key_max != ST_KEY || last.key_min >= last.key_max {
        return Err(BootstrapError::Gap(last.key_max));
    }
    let mut seen = std::collections::HashSet::new();
    for r in map {
        if !seen.insert(r.owner) {
            return Err(BootstrapError::MultipleRanges(r.owner));
        }
    }
    Ok(())
}

/// Evenly spaced ranges over `[lo, hi)`, one per server; the outer ranges
/// extend to the sentinels.
pub fn even_partition(servers: &[ServerId], lo: Key, hi: Key) -> Vec<PartitionRange> {
    let n = servers.len() as i128;
    let width = (hi as i128 - lo as i128) / n.max(1);
    servers
        .iter()
        .enumerate()
        .map(|(i, &owner)| {
            let i = i as i128;
            let key_min = if i == 0 { SH_KEY } else { (lo as i128 + width * i) as Key };
            let key_max = if i == n - 1 { ST_KEY } else { (lo as i128 + width * (i + 1)) as Key };
            PartitionRange { key_min, key_max, owner }
        })
        .collect()
}

/// A server's complete in-memory state.
pub struct Shard {
    id: ServerId,
    pub arena: Arc<Arena>,
    pub clock: Clock,
    pub registry: Registry,
    pub faults: Faults,
    pub stats: Arc<Stats>,
    net: OnceLock<SharedNetwork>,
    /// Incoming moved sublists, keyed by keyMax, attached at switch time.
    pub(crate) staged: Mutex<HashMap<Key, Arc<Staged>>>,
    /// Serializes this server's background operations.
    pub(crate) bg_lock: Mutex<()>,
    /// When each owned sublist (by keyMin) was created or received.
    pub(crate) arrivals: Mutex<HashMap<Key, Instant>>,
    pub(crate) cancelled: AtomicBool,
}

/// A sublist copy being built by an incoming Move.
#[derive(Debug)]
pub(crate) struct Staged {
    pub(crate) entry: Arc<Entry>,
    /// Set once the source has frozen and re-sent its subtail link; only
    /// then may neighbours re-aim the copy's subtail.
    pub(crate) sealed: AtomicBool,
}

impl fmt::Debug for Shard {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Shard").field("id", &self.id).finish_non_exhaustive()
    }
}

impl Shard {
    pub fn new(id: ServerId, arena_capacity: u64) -> Arc<Shard> {
        Shard::with_registry_capacity(id, arena_capacity, MAX_SUBLISTS)
    }

    pub fn with_registry_capacity(id: ServerId, arena_capacity: u64, registry_capacity: usize) -> Arc<Shard> {
        Arc::new(Shard {
            id,
            arena: Arena::new(id, arena_capacity),
            clock: Clock::default(),
            registry: Registry::with_capacity(registry_capacity),
            faults: Faults::default(),
            stats: Arc::new(Stats::default()),
            net: OnceLock::new(),
            staged: Mutex::new(HashMap::new()),
            bg_lock: Mutex::new(()),
            arrivals: Mutex::new(HashMap::new()),
            cancelled: AtomicBool::new(false),
        })
    }

    pub fn id(&self) -> ServerId {
        self.id
    }

    /// Connects the shard to its cluster. Only the first call has an effect.
    pub fn attach_network(&self, net: SharedNetwork) {
        let _ = self.net.set(net);
    }

    pub fn network(&self) -> Option<&SharedNetwork> {
        self.net.get()
    }

    pub(crate) fn net(&self) -> &SharedNetwork {
        self.net.get().expect("shard is not attached to a network")
    }

    /// Builds the initial sublists and registry from the partition map.
    /// Every server computes identical references for every range, so all
    /// registries agree from the start.
    pub fn install_partition(&self, map: &[PartitionRange]) -> Result<(), BootstrapError> {
        validate_partition(map)?;
        if !self.registry.is_empty() || self.arena.slots_in_use() != 0 {
            return Err(BootstrapError::NotFresh);
        }
        for (i, r) in map.iter().enumerate() {
            let sh = initial_subhead(r.owner);
            if r.owner != self.id {
                self.registry.add_entry(Entry::routing(sh, r.key_min, r.key_max))?;
                continue;
            }
            let next_sh = map.get(i + 1).map_or(NodeRef::NULL, |n| initial_subhead(n.owner));
            let pair = self.arena.alloc_pair().expect("fresh arena");
            let sh_ts = self.clock.next_timestamp();
            let got_sh = self
                .arena
                .alloc_node(NodeInit::item(SH_KEY, sh_ts, self.id, NodeRef::NULL, pair))
                .expect("fresh arena");
            let st_ts = self.clock.next_timestamp();
            let got_st = self
                .arena
                .alloc_node(NodeInit { key_max: r.key_max, ..NodeInit::item(ST_KEY, st_ts, self.id, next_sh, pair) })
                .expect("fresh arena");
            assert_eq!((got_sh, got_st), (sh, initial_subtail(self.id)));
            self.arena.node(sh).store_next(got_st);
            self.arena.node(sh).pin();
            self.arena.node(got_st).pin();
            self.registry.add_entry(Entry::new(sh, got_st, r.key_min, r.key_max, pair, 0))?;
        }
        Ok(())
    }

    pub fn node(&self, r: NodeRef) -> &Node {
        self.arena.node(r)
    }

    pub fn is_local(&self, r: NodeRef) -> bool {
        self.arena.is_local(r)
    }

    /// True if the node's start counter has been frozen by a Move.
    pub fn is_frozen(&self, r: NodeRef) -> bool {
        let pair = self.node(r).pair();
        !pair.is_none() && self.arena.pair(pair).st.is_frozen()
    }

    /// Entries of sublists this server currently serves.
    pub fn owned_entries(&self) -> Vec<Arc<Entry>> {
        self.registry
            .snapshot()
            .entries()
            .iter()
            .filter(|e| e.is_owned_by(self.id))
            .cloned()
            .collect()
    }

    /// Approximate number of items this server holds.
    pub fn load_estimate(&self) -> i64 {
        self.owned_entries()
            .iter()
            .map(|e| self.arena.pair(e.pair()).size.load(SeqCst).max(0))
            .sum()
    }

    /// Makes background spin loops give up; used at shutdown.
    pub fn cancel_background(&self) {
        self.cancelled.store(true, SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.cancelled.load(SeqCst)
    }

    pub(crate) fn chaos(&self, point: ChaosPoint) {
        self.faults.chaos(self.id, point)
    }

}
