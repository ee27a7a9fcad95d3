//! Maintenance operations on sublists: Split, Move (with Replay), Switch and
//! Merge, plus the peer-side handlers they rely on.
//!
//! All operations on one server are serialized by its background lock.
//! Client operations never take that lock.

mod merge;
mod moving;
mod split;
mod switch;

use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam::epoch;
use crossbeam::utils::Backoff;
use parking_lot::MutexGuard;
use thiserror::Error;

use crate::node::{ArenaError, Key, NodeRef, PairId, ServerId, SH_KEY, ST_KEY};
use crate::registry::{Entry, RegistryError};
use crate::shard::{is_client_thread, Shard, Stats};
use crate::transport::message::code;
use crate::transport::{Message, TransportError};

pub use split::SplitOutcome;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackgroundError {
    #[error("precondition failed: {0}")]
    Precondition(&'static str),
    #[error(transparent)]
    Arena(#[from] ArenaError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("server {server}: {source}")]
    Transport { server: ServerId, source: TransportError },
    #[error("server {server} rejected {what} with code {code}")]
    Rejected { server: ServerId, what: &'static str, code: i64 },
    #[error("timed out waiting for {0}")]
    Timeout(&'static str),
    #[error("background work cancelled")]
    Cancelled,
}

/// Pause between retries of a peer request that is expected to succeed
/// eventually.
const RETRY_CAP: Duration = Duration::from_millis(50);

/// How long a Move waits for an in-flight replicate to resolve a node.
pub(crate) const PENDING_TIMEOUT: Duration = Duration::from_secs(60);

/// Sleeps with exponential backoff capped at [`RETRY_CAP`].
pub(crate) struct Pause(u32);

impl Pause {
    pub(crate) fn new() -> Self {
        Pause(0)
    }

    pub(crate) fn wait(&mut self) {
        let d = Duration::from_micros(50u64 << self.0.min(10));
        thread::sleep(d.min(RETRY_CAP));
        self.0 += 1;
    }
}

impl Shard {
    /// Takes the background lock. A client thread arriving here would be a
    /// liveness bug, so it is counted.
    pub(crate) fn lock_background(&self) -> MutexGuard<'_, ()> {
        if is_client_thread() {
            Stats::bump(&self.stats.maintenance_waits);
        }
        self.bg_lock.lock()
    }

    fn check_cancelled(&self) -> Result<(), BackgroundError> {
        if self.is_cancelled() {
            Err(BackgroundError::Cancelled)
        } else {
            Ok(())
        }
    }

    /// Spins until `pid` is quiescent: every update that started on it has
    /// finished. End is read before start so that equality implies no
    /// update was in flight in between.
    pub(crate) fn wait_quiescent(&self, pid: PairId, offset: i64) -> Result<(), BackgroundError> {
        let pair = self.arena.pair(pid);
        let backoff = Backoff::new();
        loop {
            let end = pair.end.load();
            if pair.st.load() - end == offset {
                return Ok(());
            }
            Stats::bump(&self.stats.offset_spins);
            self.check_cancelled()?;
            if backoff.is_completed() {
                thread::sleep(Duration::from_micros(20));
            } else {
                backoff.snooze();
            }
        }
    }

    /// Points every node from `first` through `last` at pair `to`. Repeats
    /// until a pass that follows a quiescent instant of `from` finds nothing
    /// left to change, which catches nodes inserted by updates that had
    /// already captured `from`.
    pub(crate) fn retarget(
        &self,
        first: NodeRef,
        last: NodeRef,
        from: PairId,
        from_offset: i64,
        to: PairId,
    ) -> Result<usize, BackgroundError> {
        let mut total = 0;
        loop {
            let stale = {
                let _guard = epoch::pin();
                let mut stale = 0;
                let mut curr = first;
                loop {
                    let n = self.node(curr);
                    if n.pair() != to {
                        n.set_pair(to);
                        stale += 1;
                    }
                    if curr == last {
                        break;
                    }
                    curr = self.arena.load_next(curr).unmarked();
                    assert!(self.is_local(curr), "retarget walk left the sublist at {curr:?}");
                }
                stale
            };
            total += stale;
            self.wait_quiescent(from, from_offset)?;
            if stale == 0 {
                return Ok(total);
            }
        }
    }

    /// Number of unmarked client nodes strictly between `from` and `to`.
    pub(crate) fn count_between(&self, from: NodeRef, to: NodeRef) -> i64 {
        let _guard = epoch::pin();
        let mut n = 0;
        let mut curr = self.arena.load_next(from).unmarked();
        while curr != to && self.is_local(curr) {
            let next = self.arena.load_next(curr);
            let key = self.node(curr).key();
            if key != SH_KEY && key != ST_KEY && !next.is_marked() {
                n += 1;
            }
            curr = next.unmarked();
        }
        n
    }

    /// Sends a request, retrying transport failures with backoff up to
    /// `attempts` times (0 means until cancelled). Error acks other than
    /// NOT_READY are returned to the caller.
    pub(crate) fn call(&self, dest: ServerId, msg: Message, attempts: u32) -> Result<Message, BackgroundError> {
        let mut pause = Pause::new();
        let mut tries = 0;
        loop {
            match self.net().request(dest, msg) {
                Ok(Message::Ack { ok: false, value: code::NOT_READY }) => {}
                Ok(resp) => return Ok(resp),
                Err(e) => {
                    tries += 1;
                    log::warn!("server {}: {:?} to {dest} failed ({e}), attempt {tries}", self.id(), msg.tag());
                    if attempts != 0 && tries >= attempts {
                        return Err(BackgroundError::Transport { server: dest, source: e });
                    }
                }
            }
            self.check_cancelled()?;
            pause.wait();
        }
    }

    /// Sends `msg` to every other server and waits for each positive ack.
    pub(crate) fn broadcast(&self, msg: Message, skip: &[ServerId], what: &'static str) -> Result<(), BackgroundError> {
        for s in self.net().servers() {
            if s == self.id() || skip.contains(&s) {
                continue;
            }
            self.expect_ack(s, msg, what)?;
        }
        Ok(())
    }

    pub(crate) fn expect_ack(&self, dest: ServerId, msg: Message, what: &'static str) -> Result<(), BackgroundError> {
        match self.call(dest, msg, 0)? {
            Message::Ack { ok: true, .. } => Ok(()),
            Message::Ack { ok: false, value } => Err(BackgroundError::Rejected { server: dest, what, code: value }),
            _ => Err(BackgroundError::Rejected { server: dest, what, code: code::BAD_REQUEST }),
        }
    }

    /// Peer-side dispatch for maintenance messages. Never blocks on this
    /// server's background lock.
    pub fn handle_background(&self, msg: Message) -> Message {
        let r = match msg {
            Message::MoveSh { sid, ts, key_min, key_max } => self.move_sh_recv(sid, ts, key_min, key_max),
            Message::MoveItem { prev, key, marked, st_next, sid, ts } => {
                self.move_item_recv(prev, key, marked, st_next, sid, ts)
            }
            Message::RepInsert { prev_loc, old_loc, key, prev_sid, prev_ts, sid, ts } => {
                self.rep_insert_recv(prev_loc, old_loc, key, (prev_sid, prev_ts), (sid, ts))
            }
            Message::RepDelete { prev_loc, old_loc, key, sid, ts } => self.rep_delete_recv(prev_loc, old_loc, key, sid, ts),
            Message::RegisterSublist { key_min, subhead } => self.register_sublist_recv(key_min, subhead),
            Message::SwitchSt { key_min, new_sh } => self.switch_st_recv(key_min, new_sh),
            Message::SwitchServer { key_max, new_sh } => self.switch_server_recv(key_max, new_sh),
            Message::RegisterMerged { key_mid } => self.register_merged_recv(key_mid),
            _ => Err(code::BAD_REQUEST),
        };
        r.unwrap_or_else(Message::error)
    }

    /// Routing-only copy of a new range on a peer after a Split.
    pub(crate) fn register_sublist_recv(&self, key_min: Key, subhead: NodeRef) -> Result<Message, i64> {
        if self.registry.entry_starting_at(key_min).is_some() {
            return Ok(ack());
        }
        let cover = self.registry.get_by_key(key_min).ok_or(code::UNKNOWN_RANGE)?;
        if key_min >= cover.key_max() {
            return Err(code::UNKNOWN_RANGE);
        }
        self.registry
            .add_entry(Entry::routing(subhead, key_min, cover.key_max()))
            .map_err(|_| code::EXHAUSTED)?;
        self.registry.update_entry_fields(&cover, crate::registry::EntryUpdate { key_max: Some(key_min), ..Default::default() });
        Ok(ack())
    }

    /// Peer-side half of Merge: the range starting at `key_mid` folds into
    /// its left neighbour.
    pub(crate) fn register_merged_recv(&self, key_mid: Key) -> Result<Message, i64> {
        let Some(right) = self.registry.entry_starting_at(key_mid) else {
            // already applied if some entry spans the boundary
            let e = self.registry.get_by_key(key_mid).ok_or(code::UNKNOWN_RANGE)?;
            return if e.key_max() > key_mid { Ok(ack()) } else { Err(code::UNKNOWN_RANGE) };
        };
        let left = self.registry.get_by_key(key_mid).ok_or(code::UNKNOWN_RANGE)?;
        if left.key_max() != key_mid {
            return Err(code::UNKNOWN_RANGE);
        }
        self.registry
            .update_entry_fields(&left, crate::registry::EntryUpdate { key_max: Some(right.key_max()), ..Default::default() });
        self.registry.remove_entry(&right);
        Ok(ack())
    }

    /// Records that the sublist starting at `key_min` just appeared here.
    pub(crate) fn note_arrival(&self, key_min: Key) {
        self.arrivals.lock().insert(key_min, Instant::now());
    }

    /// Time since the sublist starting at `key_min` was created or received.
    pub fn sublist_age(&self, key_min: Key) -> Option<Duration> {
        self.arrivals.lock().get(&key_min).map(Instant::elapsed)
    }

    pub(crate) fn owned(&self, e: &Arc<Entry>) -> bool {
        e.is_owned_by(self.id()) && self.registry.snapshot().entries().iter().any(|x| Arc::ptr_eq(x, e))
    }
}

pub(crate) fn ack() -> Message {
    Message::Ack { ok: true, value: 0 }
}

#[cfg(test)]
pub(crate) mod testkit;
