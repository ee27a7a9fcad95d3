//! Client operations on the sublists of one server.
//!
//! Operations never block on background work. When a sublist has been moved
//! or the key belongs to a remote sublist they return a delegation directive
//! instead of a result; the caller forwards the request.

use std::sync::atomic::Ordering::SeqCst;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam::epoch::{self, Guard};
use crossbeam::utils::Backoff;
use thiserror::Error;

use crate::node::{is_client_key, ArenaError, CounterPair, Key, NodeInit, NodeRef, PairId, ServerId, SH_KEY, ST_KEY};
use crate::shard::{ChaosPoint, Shard, Stats};
use crate::transport::{Message, OpKind};

/// Result of a traversal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SearchOutcome {
    /// `node` holds the key; `left` precedes it; `head` is the subhead of
    /// the sublist the traversal ended in.
    Found { node: NodeRef, left: NodeRef, head: NodeRef },
    NotFound { left: NodeRef, head: NodeRef },
    /// The key is served by the (remote) sublist starting at this subhead.
    Forward(NodeRef),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpResult {
    Done(bool),
    Delegate { server: ServerId, subhead: NodeRef },
    /// Remove the copy of a node on the server that now holds it.
    DelegateDelete { server: ServerId, node: NodeRef },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OpError {
    #[error("key {0} is reserved for sentinels")]
    ReservedKey(Key),
    #[error(transparent)]
    Exhausted(#[from] ArenaError),
}

/// Longest an update holds off for a Move's freeze.
const DRAIN_WAIT: Duration = Duration::from_millis(1);

pub(crate) enum Route {
    Local(NodeRef),
    Forward(NodeRef),
}

enum DeleteOutcome {
    Done(OpResult),
    /// The node's sublist was frozen: redo the remove from this subhead.
    Retry(NodeRef),
}

fn delegate(target: NodeRef) -> OpResult {
    OpResult::Delegate { server: target.server(), subhead: target }
}

impl Shard {
    /// Resolves the sublist serving `key` through the registry, following
    /// frozen local subheads to their copies.
    pub(crate) fn reroute(&self, key: Key) -> Route {
        let entry = self.registry.get_by_key(key).expect("registry covers every client key");
        self.route_subhead(entry.subhead())
    }

    pub(crate) fn route_subhead(&self, sh: NodeRef) -> Route {
        if !self.is_local(sh) {
            return Route::Forward(sh);
        }
        if self.is_frozen(sh) {
            let loc = self.node(sh).new_loc();
            if loc.is_real() {
                return Route::Forward(loc);
            }
        }
        Route::Local(sh)
    }

    /// Harris traversal from `head`. Marked nodes met on the way are
    /// delinked; a failed delink restarts from the current subhead.
    pub fn search(&self, key: Key, head: NodeRef, guard: &Guard) -> SearchOutcome {
        let mut head = head;
        'restart: loop {
            let first = self.arena.load_next(head);
            if first.is_marked() {
                // subhead removed by a merge
                match self.reroute(key) {
                    Route::Forward(t) => return SearchOutcome::Forward(t),
                    Route::Local(h) => {
                        if h == head {
                            std::thread::yield_now();
                        }
                        head = h;
                        Stats::bump(&self.stats.search_restarts);
                        continue 'restart;
                    }
                }
            }
            if self.is_frozen(head) {
                let loc = self.node(head).new_loc();
                if loc.is_real() {
                    Stats::bump(&self.stats.blue_reroutes);
                    return SearchOutcome::Forward(loc);
                }
            }
            let mut prev = head;
            let mut curr = first;
            loop {
                let next = self.arena.load_next(curr);
                if next.is_marked() {
                    match self.delink(prev, curr, next, guard) {
                        Some(after) => {
                            curr = after;
                            continue;
                        }
                        None => {
                            Stats::bump(&self.stats.search_restarts);
                            continue 'restart;
                        }
                    }
                }
                let node = self.node(curr);
                let ckey = node.key();
                if self.is_frozen(curr) {
                    Stats::bump(&self.stats.blue_reroutes);
                    match self.reroute(key) {
                        Route::Forward(t) => return SearchOutcome::Forward(t),
                        Route::Local(h) => {
                            if h == head {
                                std::thread::yield_now();
                            }
                            head = h;
                            Stats::bump(&self.stats.search_restarts);
                            continue 'restart;
                        }
                    }
                }
                if ckey == ST_KEY {
                    if key <= node.key_max() || next.is_null() {
                        return SearchOutcome::NotFound { left: prev, head };
                    }
                    Stats::bump(&self.stats.red_hops);
                    if !self.is_local(next) {
                        return SearchOutcome::Forward(next);
                    }
                    head = next;
                    continue 'restart;
                }
                if ckey != SH_KEY {
                    if ckey == key {
                        return SearchOutcome::Found { node: curr, left: prev, head };
                    }
                    if ckey > key {
                        return SearchOutcome::NotFound { left: prev, head };
                    }
                }
                prev = curr;
                curr = next;
            }
        }
    }

    /// Unlinks the run of marked nodes starting at `curr` with one CAS on
    /// `prev.next`. Returns the first unmarked successor on success.
    pub fn delink(&self, prev: NodeRef, curr: NodeRef, curr_next: NodeRef, guard: &Guard) -> Option<NodeRef> {
        let mut run = vec![curr];
        let mut succ = curr_next.unmarked();
        while self.is_local(succ) {
            let n = self.arena.load_next(succ);
            if !n.is_marked() {
                break;
            }
            run.push(succ);
            succ = n.unmarked();
        }
        if !self.arena.link_cas(prev, curr, succ) {
            return None;
        }
        Stats::bump(&self.stats.delinks);
        for r in run {
            self.arena.retire(r, guard);
        }
        Some(succ)
    }

    /// Entry point for client requests (local or delegated). A NULL
    /// `subhead` resolves through the registry.
    pub fn client_op(&self, kind: OpKind, key: Key, subhead: NodeRef) -> Result<OpResult, OpError> {
        if !is_client_key(key) {
            return Err(OpError::ReservedKey(key));
        }
        let guard = epoch::pin();
        let head = if self.is_local(subhead) && !self.is_frozen(subhead) {
            subhead
        } else if !subhead.is_null() && !self.is_local(subhead) {
            return Ok(delegate(subhead));
        } else {
            match self.reroute(key) {
                Route::Local(h) => h,
                Route::Forward(t) => return Ok(delegate(t)),
            }
        };
        match kind {
            OpKind::Find => Ok(self.find_from(key, head, &guard)),
            OpKind::Insert => self.insert_from(key, head, &guard),
            OpKind::Remove => Ok(self.remove_from(key, head, &guard)),
        }
    }

    pub fn find(&self, key: Key) -> Result<OpResult, OpError> {
        self.client_op(OpKind::Find, key, NodeRef::NULL)
    }

    pub fn insert(&self, key: Key) -> Result<OpResult, OpError> {
        self.client_op(OpKind::Insert, key, NodeRef::NULL)
    }

    pub fn remove(&self, key: Key) -> Result<OpResult, OpError> {
        self.client_op(OpKind::Remove, key, NodeRef::NULL)
    }

    fn find_from(&self, key: Key, head: NodeRef, guard: &Guard) -> OpResult {
        let out = self.search(key, head, guard);
        self.chaos(ChaosPoint::AfterSearch);
        match out {
            SearchOutcome::Found { .. } => OpResult::Done(true),
            SearchOutcome::NotFound { .. } => OpResult::Done(false),
            SearchOutcome::Forward(t) => delegate(t),
        }
    }

    fn remove_from(&self, key: Key, head: NodeRef, guard: &Guard) -> OpResult {
        let mut head = head;
        loop {
            let out = self.search(key, head, guard);
            self.chaos(ChaosPoint::AfterSearch);
            match out {
                SearchOutcome::NotFound { .. } => return OpResult::Done(false),
                SearchOutcome::Forward(t) => return delegate(t),
                SearchOutcome::Found { node, .. } => match self.delete_node(node, key, guard) {
                    DeleteOutcome::Done(r) => return r,
                    DeleteOutcome::Retry(h) => head = h,
                },
            }
        }
    }

    /// Removes a specific node copy (the target of a delegated delete).
    pub fn delete_at(&self, node: NodeRef, key: Key) -> Result<OpResult, OpError> {
        if !is_client_key(key) {
            return Err(OpError::ReservedKey(key));
        }
        let guard = epoch::pin();
        if !self.is_local(node) || self.node(node).key() != key {
            return self.client_op(OpKind::Remove, key, NodeRef::NULL);
        }
        Ok(match self.delete_node(node, key, &guard) {
            DeleteOutcome::Done(r) => r,
            DeleteOutcome::Retry(h) => self.remove_from(key, h, &guard),
        })
    }

    /// Increments the start counter of `node`'s pair, retrying if a
    /// concurrent split or merge re-targets the node meanwhile. Returns the
    /// pair and the post-increment start value.
    pub(crate) fn start_update(&self, node: NodeRef) -> (PairId, &CounterPair, i64) {
        loop {
            let pid = self.node(node).pair();
            let pair = self.arena.pair(pid);
            if pair.draining.load(SeqCst) {
                self.hold_off(pair);
            }
            let st = pair.st.increment();
            if self.node(node).pair() == pid {
                return (pid, pair, st);
            }
            pair.end.increment();
        }
    }

    /// Waits a bounded time for a pending freeze of `pair` to land.
    fn hold_off(&self, pair: &CounterPair) {
        Stats::bump(&self.stats.drain_waits);
        let until = Instant::now() + DRAIN_WAIT;
        let backoff = Backoff::new();
        while pair.draining.load(SeqCst) && !pair.st.is_frozen() && Instant::now() < until {
            backoff.snooze();
        }
    }

    /// Sign-property monitor: a successful update must never land on a
    /// sublist whose start counter is already frozen.
    fn check_sign(&self, pair: &CounterPair) {
        if pair.st.is_frozen() {
            Stats::bump(&self.stats.sign_violations);
        }
    }

    fn delete_node(&self, node: NodeRef, key: Key, guard: &Guard) -> DeleteOutcome {
        let skip_mark = self.faults.skip_mark_check();
        if !skip_mark && self.arena.load_next(node).is_marked() {
            return DeleteOutcome::Done(OpResult::Done(false));
        }
        let (pid, pair, st) = self.start_update(node);
        self.chaos(ChaosPoint::AfterStartCount);
        if st < 0 {
            pair.end.increment();
            Stats::bump(&self.stats.blue_reroutes);
            let loc = self.node(node).new_loc();
            if loc.is_real() {
                return DeleteOutcome::Done(OpResult::DelegateDelete { server: loc.server(), node: loc });
            }
            return match self.reroute(key) {
                Route::Local(h) => DeleteOutcome::Retry(h),
                Route::Forward(t) => DeleteOutcome::Done(delegate(t)),
            };
        }
        let mut result = false;
        loop {
            let next = self.arena.load_next(node);
            if next.is_marked() && !skip_mark {
                pair.end.increment();
                break;
            }
            self.chaos(ChaosPoint::BeforeLinkCas);
            if self.arena.link_cas(node, next, next.marked()) {
                self.check_sign(pair);
                result = true;
                pair.size.fetch_sub(1, SeqCst);
                let loc = self.node(node).new_loc();
                if loc.is_null() {
                    pair.end.increment();
                } else {
                    self.replicate_delete(node, key, pid, loc);
                }
                break;
            }
        }
        if let Route::Local(h) = self.reroute(key) {
            let _ = self.search(key, h, guard);
        }
        DeleteOutcome::Done(OpResult::Done(result))
    }

    fn insert_from(&self, key: Key, head: NodeRef, guard: &Guard) -> Result<OpResult, OpError> {
        let mut head = head;
        loop {
            let (left, h) = match self.search(key, head, guard) {
                SearchOutcome::Forward(t) => return Ok(delegate(t)),
                SearchOutcome::Found { .. } => return Ok(OpResult::Done(false)),
                SearchOutcome::NotFound { left, head } => (left, head),
            };
            head = h;
            self.chaos(ChaosPoint::AfterSearch);
            let temp = self.arena.load_next(left);
            if temp.is_marked() || !self.is_local(temp) {
                Stats::bump(&self.stats.search_restarts);
                continue;
            }
            let right = self.node(temp);
            let rkey = right.key();
            if rkey == key {
                if !self.is_frozen(temp) {
                    return Ok(OpResult::Done(false));
                }
                match self.reroute(key) {
                    Route::Local(h) => {
                        head = h;
                        continue;
                    }
                    Route::Forward(t) => return Ok(delegate(t)),
                }
            }
            if rkey == ST_KEY {
                if right.key_max() < key {
                    let next_sh = self.arena.load_next(temp).unmarked();
                    Stats::bump(&self.stats.red_hops);
                    if !self.is_local(next_sh) {
                        return Ok(delegate(next_sh));
                    }
                    head = next_sh;
                    continue;
                }
            } else if rkey < key || rkey == SH_KEY {
                // a smaller key slipped in after the search
                continue;
            }
            let (pid, pair, st) = self.start_update(left);
            self.chaos(ChaosPoint::AfterStartCount);
            if st < 0 && !self.faults.skip_freeze_check() {
                pair.end.increment();
                Stats::bump(&self.stats.blue_reroutes);
                match self.reroute(key) {
                    Route::Local(h) => {
                        head = h;
                        continue;
                    }
                    Route::Forward(t) => return Ok(delegate(t)),
                }
            }
            let ts = self.clock.next_timestamp();
            let left_loc = self.node(left).new_loc();
            let init = NodeInit {
                new_loc: if left_loc.is_null() { NodeRef::NULL } else { NodeRef::pending(dest_of(left_loc)) },
                ..NodeInit::item(key, ts, self.id(), temp, pid)
            };
            let new = match self.arena.alloc_node(init) {
                Ok(n) => n,
                Err(e) => {
                    pair.end.increment();
                    return Err(e.into());
                }
            };
            self.chaos(ChaosPoint::BeforeLinkCas);
            if self.arena.link_cas(left, temp, new) {
                self.check_sign(pair);
                pair.size.fetch_add(1, SeqCst);
                // re-read: a Move may have copied `left` after we created the node
                let left_loc = self.node(left).new_loc();
                if left_loc.is_null() {
                    pair.end.increment();
                } else {
                    self.node(new).set_new_loc(NodeRef::pending(dest_of(left_loc)));
                    self.replicate_insert(left, new, key, pid, left_loc);
                }
                return Ok(OpResult::Done(true));
            }
            self.arena.free_unpublished(new);
            pair.end.increment();
        }
    }

    /// Sends the replicate for an insert that landed after an already
    /// copied node. The end counter is bumped when the copy is confirmed.
    fn replicate_insert(&self, left: NodeRef, new: NodeRef, key: Key, pid: PairId, left_loc: NodeRef) {
        let prev = self.node(left).identity();
        let item = self.node(new).identity();
        let msg = Message::RepInsert {
            prev_loc: if left_loc.is_real() { left_loc } else { NodeRef::NULL },
            old_loc: new,
            key,
            prev_sid: prev.sid,
            prev_ts: prev.ts,
            sid: item.sid,
            ts: item.ts,
        };
        let arena = Arc::clone(&self.arena);
        let stats = Arc::clone(&self.stats);
        Stats::bump(&self.stats.replicates_sent);
        self.net().send_async(
            dest_of(left_loc),
            msg,
            Box::new(move |resp| match resp {
                Ok(Message::ReplayRespInsert { old_loc, new_loc }) => {
                    let n = arena.node(old_loc);
                    if n.identity() == item {
                        n.resolve_new_loc(new_loc);
                    }
                    arena.pair(pid).end.increment();
                }
                other => {
                    log::error!("insert replicate of {item:?} failed: {other:?}");
                    Stats::bump(&stats.replicate_failures);
                }
            }),
        );
    }

    fn replicate_delete(&self, node: NodeRef, key: Key, pid: PairId, loc: NodeRef) {
        let item = self.node(node).identity();
        let msg = Message::RepDelete {
            prev_loc: if loc.is_real() { loc } else { NodeRef::NULL },
            old_loc: node,
            key,
            sid: item.sid,
            ts: item.ts,
        };
        let arena = Arc::clone(&self.arena);
        let stats = Arc::clone(&self.stats);
        Stats::bump(&self.stats.replicates_sent);
        self.net().send_async(
            dest_of(loc),
            msg,
            Box::new(move |resp| match resp {
                Ok(Message::ReplayRespDelete { .. }) => {
                    arena.pair(pid).end.increment();
                }
                other => {
                    log::error!("delete replicate of {item:?} failed: {other:?}");
                    Stats::bump(&stats.replicate_failures);
                }
            }),
        );
    }
}

/// Destination server of a real or pending forwarding address.
pub(crate) fn dest_of(loc: NodeRef) -> ServerId {
    if loc.is_pending() {
        loc.pending_dest()
    } else {
        loc.server()
    }
}
