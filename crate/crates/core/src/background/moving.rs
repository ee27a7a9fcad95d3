//! Move and Replay: copying a live sublist to another server while client
//! updates continue on the source.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering::SeqCst};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam::epoch;
use crossbeam::utils::Backoff;

use super::{BackgroundError, Pause, PENDING_TIMEOUT};
use crate::node::{Identity, Key, NodeInit, NodeRef, ServerId, Timestamp, SH_KEY, ST_KEY};
use crate::registry::Entry;
use crate::shard::{ChaosPoint, Shard, Staged, Stats};
use crate::transport::message::code;
use crate::transport::{Message, REPLICATE_ATTEMPTS};

/// How long a Move spins on the freeze before logging a warning.
const FREEZE_REPORT: Duration = Duration::from_secs(5);

impl Shard {
    /// Moves an owned sublist to `dest` and switches routing over to the
    /// copy. Returns the copy's subhead.
    pub fn move_sublist(&self, entry: &Arc<Entry>, dest: ServerId) -> Result<NodeRef, BackgroundError> {
        let _bg = self.lock_background();
        if dest == self.id() || !self.net().servers().contains(&dest) {
            return Err(BackgroundError::Precondition("bad move destination"));
        }
        if !self.owned(entry) || self.is_frozen(entry.subhead()) {
            return Err(BackgroundError::Precondition("move of a sublist not served here"));
        }
        let sh = entry.subhead();
        let st = entry.subtail();
        let pid = entry.pair();
        let id = self.node(sh).identity();
        let created = Message::MoveSh { sid: id.sid, ts: id.ts, key_min: entry.key_min(), key_max: entry.key_max() };
        let new_sh = match self.call(dest, created, REPLICATE_ATTEMPTS) {
            Ok(Message::RefResp { node }) if node.is_real() => node,
            Ok(other) => {
                Stats::bump(&self.stats.aborted_moves);
                let code = if let Message::Ack { value, .. } = other { value } else { code::BAD_REQUEST };
                return Err(BackgroundError::Rejected { server: dest, what: "move subhead", code });
            }
            Err(e) => {
                Stats::bump(&self.stats.aborted_moves);
                return Err(e);
            }
        };
        let placed = self.node(sh).set_new_loc(new_sh);
        if placed != new_sh {
            return Err(BackgroundError::Precondition("subhead already has a copy"));
        }

        let st_copy = self.copy_nodes(sh, st, new_sh, dest)?;

        self.chaos(ChaosPoint::BeforeFreeze);
        let pair = self.arena.pair(pid);
        let backoff = Backoff::new();
        let started = Instant::now();
        let mut reported = false;
        pair.draining.store(true, SeqCst);
        let frozen = loop {
            Stats::bump(&self.stats.freeze_attempts);
            let end = pair.end.load();
            if pair.st.freeze(end + entry.offset()) {
                break Ok(());
            }
            if self.is_cancelled() {
                break Err(BackgroundError::Cancelled);
            }
            if !reported && started.elapsed() > FREEZE_REPORT {
                log::warn!("server {}: freeze of ({}, {}] still waiting", self.id(), entry.key_min(), entry.key_max());
                reported = true;
            }
            if backoff.is_completed() {
                std::thread::sleep(Duration::from_micros(20));
            } else {
                backoff.snooze();
            }
        };
        pair.draining.store(false, SeqCst);
        frozen?;

        // The subtail link can no longer change here; send its final value.
        let st_node = self.node(st);
        let resync = Message::MoveItem {
            prev: st_copy,
            key: ST_KEY,
            marked: false,
            st_next: self.arena.load_next(st),
            sid: st_node.sid(),
            ts: st_node.ts(),
        };
        self.call(dest, resync, 0)?;
        self.switch(entry, dest, new_sh)?;
        Stats::bump(&self.stats.moves);
        Ok(new_sh)
    }

    /// Copies every node after `sh` up to and including `st` and returns the
    /// subtail's copy.
    fn copy_nodes(&self, sh: NodeRef, st: NodeRef, new_sh: NodeRef, dest: ServerId) -> Result<NodeRef, BackgroundError> {
        let guard = epoch::pin();
        let mut prev_copy = new_sh;
        let mut curr = self.arena.load_next(sh).unmarked();
        loop {
            self.chaos(ChaosPoint::MoveStep);
            let node = self.node(curr);
            if curr == st {
                let msg = Message::MoveItem {
                    prev: prev_copy,
                    key: ST_KEY,
                    marked: false,
                    st_next: self.arena.load_next(st),
                    sid: node.sid(),
                    ts: node.ts(),
                };
                let copy = self.expect_ref(dest, msg)?;
                node.resolve_new_loc(copy);
                return Ok(copy);
            }
            let mut loc = node.new_loc();
            if loc.is_pending() {
                loc = self.await_copy(curr)?;
            }
            if loc.is_null() {
                let was_marked = self.arena.load_next(curr).is_marked();
                let id = node.identity();
                let msg = Message::MoveItem {
                    prev: prev_copy,
                    key: node.key(),
                    marked: was_marked,
                    st_next: NodeRef::NULL,
                    sid: id.sid,
                    ts: id.ts,
                };
                let copy = self.expect_ref(dest, msg)?;
                node.resolve_new_loc(copy);
                loc = node.new_loc();
                if !was_marked && self.arena.load_next(curr).is_marked() {
                    let del = Message::RepDelete { prev_loc: loc, old_loc: curr, key: node.key(), sid: id.sid, ts: id.ts };
                    self.call(dest, del, 0)?;
                }
            }
            prev_copy = loc;
            curr = self.arena.load_next(curr).unmarked();
            if !self.is_local(curr) {
                drop(guard);
                return Err(BackgroundError::Precondition("move walk left the sublist"));
            }
        }
    }

    /// Waits for an in-flight insert replicate to settle a node's copy.
    fn await_copy(&self, r: NodeRef) -> Result<NodeRef, BackgroundError> {
        let deadline = Instant::now() + PENDING_TIMEOUT;
        let mut pause = Pause::new();
        loop {
            let loc = self.node(r).new_loc();
            if !loc.is_pending() {
                return Ok(loc);
            }
            self.check_cancelled()?;
            if Instant::now() > deadline {
                return Err(BackgroundError::Timeout("insert replicate"));
            }
            pause.wait();
        }
    }

    fn expect_ref(&self, dest: ServerId, msg: Message) -> Result<NodeRef, BackgroundError> {
        match self.call(dest, msg, 0)? {
            Message::RefResp { node } if node.is_real() => Ok(node),
            Message::Ack { value, .. } => Err(BackgroundError::Rejected { server: dest, what: "move item", code: value }),
            _ => Err(BackgroundError::Rejected { server: dest, what: "move item", code: code::BAD_REQUEST }),
        }
    }

    /// Destination side of MoveSH: creates the copy's sentinels and a staging
    /// record keyed by keyMax. Repeated requests for the same subhead return
    /// the same copy.
    pub(crate) fn move_sh_recv(&self, sid: ServerId, ts: Timestamp, key_min: Key, key_max: Key) -> Result<Message, i64> {
        if key_min >= key_max {
            return Err(code::BAD_REQUEST);
        }
        self.clock.observe(ts);
        let mut staged = self.staged.lock();
        if let Some(s) = staged.get(&key_max) {
            let sh = s.entry.subhead();
            if self.node(sh).identity() == (Identity { sid, ts }) {
                return Ok(Message::RefResp { node: sh });
            }
            log::warn!("server {}: replacing abandoned copy of (.., {key_max}]", self.id());
        }
        let pair = self.arena.alloc_pair().map_err(|_| code::EXHAUSTED)?;
        let copy = |init: NodeInit| self.arena.alloc_node(NodeInit { replica: true, ..init }).map_err(|_| code::EXHAUSTED);
        let st = copy(NodeInit { key_max, ..NodeInit::item(ST_KEY, ts, sid, NodeRef::NULL, pair) })?;
        let sh = copy(NodeInit::item(SH_KEY, ts, sid, st, pair))?;
        self.node(sh).pin();
        self.node(st).pin();
        let entry = Entry::new(sh, st, key_min, key_max, pair, 0);
        staged.insert(key_max, Arc::new(Staged { entry, sealed: AtomicBool::new(false) }));
        Ok(Message::RefResp { node: sh })
    }

    /// Destination side of MoveItem. A subtail item updates the copy's
    /// subtail link; sent with `prev` equal to that subtail, it is the final
    /// re-sync after the freeze and seals the copy.
    pub(crate) fn move_item_recv(
        &self,
        prev: NodeRef,
        key: Key,
        marked: bool,
        st_next: NodeRef,
        sid: ServerId,
        ts: Timestamp,
    ) -> Result<Message, i64> {
        if !self.is_local(prev) {
            return Err(code::BAD_REQUEST);
        }
        self.clock.observe(ts);
        if key != ST_KEY {
            let node = self.replay(prev, ts, key, sid, ts, marked).map_err(|_| code::EXHAUSTED)?;
            return Ok(Message::RefResp { node });
        }
        let resync = self.node(prev).key() == ST_KEY;
        let mut st = prev;
        while self.node(st).key() != ST_KEY {
            st = self.arena.load_next(st).unmarked();
            if !self.is_local(st) {
                return Err(code::BAD_REQUEST);
            }
        }
        let node = self.node(st);
        node.store_next(st_next);
        node.set_ts(ts);
        if resync {
            let staged = self.staged.lock();
            if let Some(s) = staged.values().find(|s| s.entry.subtail() == st) {
                s.sealed.store(true, SeqCst);
            }
        }
        Ok(Message::RefResp { node: st })
    }

    /// Inserts a copy of item `(sid, ts)` after `prev`, skipping nodes at
    /// least as new as `comp_ts`. A node with the same identity already in
    /// that window is returned instead of inserting a duplicate.
    pub fn replay(
        &self,
        prev: NodeRef,
        comp_ts: Timestamp,
        key: Key,
        sid: ServerId,
        ts: Timestamp,
        marked: bool,
    ) -> Result<NodeRef, crate::node::ArenaError> {
        let item = Identity { sid, ts };
        let pid = self.node(prev).pair();
        let mut fresh = NodeRef::NULL;
        loop {
            let mut p = prev;
            let (p, w) = loop {
                let w = self.arena.load_next(p);
                let c = w.unmarked();
                if !self.is_local(c) {
                    break (p, w);
                }
                let cn = self.node(c);
                if cn.key() == ST_KEY || cn.ts() < comp_ts {
                    break (p, w);
                }
                if cn.identity() == item {
                    if !fresh.is_null() {
                        self.arena.free_unpublished(fresh);
                    }
                    return Ok(c);
                }
                p = c;
            };
            let next = w.unmarked().with_mark(marked);
            if fresh.is_null() {
                fresh = self.arena.alloc_node(NodeInit { replica: true, ..NodeInit::item(key, ts, sid, next, pid) })?;
            } else {
                self.node(fresh).store_next(next);
            }
            if self.arena.link_cas(p, w, fresh.with_mark(w.is_marked())) {
                return Ok(fresh);
            }
        }
    }

    /// Subhead of the copy (staged or attached) whose range covers `key`.
    fn copy_head(&self, key: Key) -> Option<NodeRef> {
        let staged = self.staged.lock();
        if let Some(s) = staged.values().find(|s| s.entry.covers(key)) {
            return Some(s.entry.subhead());
        }
        drop(staged);
        let e = self.registry.get_by_key(key)?;
        self.is_local(e.subhead()).then(|| e.subhead())
    }

    /// Finds the node with identity `id` at or after `from`, up to the
    /// copy's subtail.
    fn find_identity(&self, from: NodeRef, id: Identity) -> Option<NodeRef> {
        let mut curr = from;
        while self.is_local(curr) {
            let n = self.node(curr);
            if n.key() == ST_KEY {
                return None;
            }
            if n.identity() == id {
                return Some(curr);
            }
            curr = self.arena.load_next(curr).unmarked();
        }
        None
    }

    /// Destination side of an insert replicate. Answers NOT_READY while the
    /// predecessor has not been copied yet; the sender redelivers.
    pub(crate) fn rep_insert_recv(
        &self,
        prev_loc: NodeRef,
        old_loc: NodeRef,
        key: Key,
        prev_id: (ServerId, Timestamp),
        item: (ServerId, Timestamp),
    ) -> Result<Message, i64> {
        let prev_id = Identity { sid: prev_id.0, ts: prev_id.1 };
        let start = if prev_loc.is_real() {
            if !self.is_local(prev_loc) {
                return Err(code::BAD_REQUEST);
            }
            prev_loc
        } else {
            self.copy_head(key).ok_or(code::NOT_READY)?
        };
        let _guard = epoch::pin();
        let prev = self.find_identity(start, prev_id).ok_or(code::NOT_READY)?;
        self.clock.observe(item.1);
        let new_loc = self.replay(prev, item.1, key, item.0, item.1, false).map_err(|_| code::EXHAUSTED)?;
        Ok(Message::ReplayRespInsert { old_loc, new_loc })
    }

    /// Destination side of a delete replicate: marks the copy. Idempotent.
    pub(crate) fn rep_delete_recv(
        &self,
        prev_loc: NodeRef,
        old_loc: NodeRef,
        key: Key,
        sid: ServerId,
        ts: Timestamp,
    ) -> Result<Message, i64> {
        let id = Identity { sid, ts };
        let _guard = epoch::pin();
        let target = if prev_loc.is_real() {
            if !self.is_local(prev_loc) || self.node(prev_loc).identity() != id {
                return Err(code::BAD_REQUEST);
            }
            prev_loc
        } else {
            let head = self.copy_head(key).ok_or(code::NOT_READY)?;
            self.find_identity(head, id).ok_or(code::NOT_READY)?
        };
        loop {
            let w = self.arena.load_next(target);
            if w.is_marked() || self.arena.link_cas(target, w, w.marked()) {
                break;
            }
        }
        Ok(Message::ReplayRespDelete { old_loc })
    }

    /// Staged copies by keyMax; for inspection in tests and monitors.
    pub fn staged_ranges(&self) -> HashMap<Key, (Key, NodeRef)> {
        self.staged.lock().iter().map(|(k, s)| (*k, (s.entry.key_min(), s.entry.subhead()))).collect()
    }
}
