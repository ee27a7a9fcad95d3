//! The naive load balancer: split oversized sublists, gossip loads and move
//! one sublist off an overloaded server.

use std::fmt;
use std::sync::atomic::Ordering::SeqCst;
use std::sync::Arc;
use std::time::{Duration, Instant};

use super::server::{pack_gossip, Server};
use crate::background::SplitOutcome;
use crate::node::{is_client_key, Key, NodeRef, ServerId};
use crate::registry::Entry;
use crate::shard::Shard;
use crate::transport::Message;

/// What one tick did.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TickReport {
    pub splits: u32,
    pub failed_splits: u32,
    pub moves: u32,
    pub failed_moves: u32,
}

impl TickReport {
    pub fn acted(&self) -> bool {
        *self != TickReport::default()
    }
}

impl fmt::Display for TickReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "splits={} failed_splits={} moves={} failed_moves={}",
            self.splits, self.failed_splits, self.moves, self.failed_moves
        )
    }
}

impl Server {
    /// One balancing round. Failures are logged and left for the next tick.
    pub fn balancer_tick(&self) -> TickReport {
        let mut report = TickReport::default();
        self.split_oversized(&mut report);
        let loads = self.gossip();
        if let Some((entry, dest)) = self.pick_move(&loads) {
            let started = Instant::now();
            match self.shard().move_sublist(&entry, dest) {
                Ok(_) => {
                    report.moves += 1;
                    self.record_background("move", started.elapsed());
                    log::info!(
                        "event=move server={} dest={dest} key_min={} key_max={} micros={}",
                        self.id(),
                        entry.key_min(),
                        entry.key_max(),
                        started.elapsed().as_micros()
                    );
                }
                Err(e) => {
                    report.failed_moves += 1;
                    log::warn!("event=move_failed server={} dest={dest} error=\"{e}\"", self.id());
                }
            }
        }
        report
    }

    fn split_oversized(&self, report: &mut TickReport) {
        let shard = self.shard();
        for e in shard.owned_entries() {
            if shard.is_frozen(e.subhead()) || size_of(shard, &e) <= self.tuning.split_threshold {
                continue;
            }
            let Some(mid) = shard.split_point(&e) else { continue };
            let mid_key = shard.node(mid).key();
            let started = Instant::now();
            let mut outcome = shard.split(&e, mid);
            if let Ok(SplitOutcome::Failed) = outcome {
                // the midpoint died; one retry with its predecessor
                if let Some(prev) = live_predecessor(shard, &e, mid_key) {
                    outcome = shard.split(&e, prev);
                }
            }
            match outcome {
                Ok(SplitOutcome::NewEntry(r)) => {
                    report.splits += 1;
                    self.record_background("split", started.elapsed());
                    log::debug!("event=split server={} at={} micros={}", self.id(), r.key_min(), started.elapsed().as_micros());
                }
                Ok(SplitOutcome::Failed) => report.failed_splits += 1,
                Err(err) => {
                    report.failed_splits += 1;
                    log::warn!("event=split_failed server={} error=\"{err}\"", self.id());
                }
            }
        }
    }

    /// Exchanges load estimates with every peer. Unreachable peers keep
    /// their last known load.
    fn gossip(&self) -> Vec<(ServerId, i64)> {
        let shard = self.shard();
        let me = self.id();
        let mine = shard.load_estimate();
        let net = shard.network().expect("network attached");
        let mut known = self.peer_loads.lock().clone();
        for peer in net.servers() {
            if peer == me {
                continue;
            }
            match net.request(peer, Message::Ack { ok: true, value: pack_gossip(me, mine) }) {
                Ok(Message::Ack { ok: true, value }) => {
                    known.insert(peer, value);
                }
                other => log::debug!("event=gossip_failed server={me} peer={peer} reply={other:?}"),
            }
        }
        self.stats.gossip_rounds.fetch_add(1, SeqCst);
        *self.peer_loads.lock() = known.clone();
        known.insert(me, mine);
        let mut loads: Vec<_> = known.into_iter().collect();
        loads.sort_unstable();
        loads
    }

    /// A sublist to hand to the least-loaded peer, if this server holds
    /// more than its trigger share and a move strictly narrows the gap.
    fn pick_move(&self, loads: &[(ServerId, i64)]) -> Option<(Arc<Entry>, ServerId)> {
        let me = self.id();
        let total: i64 = loads.iter().map(|l| l.1).sum();
        let mine = loads.iter().find(|l| l.0 == me)?.1;
        let fair = total as f64 / loads.len() as f64;
        if total == 0 || loads.len() < 2 || (mine as f64) <= self.tuning.move_trigger_ratio * fair {
            return None;
        }
        let &(dest, dest_load) = loads.iter().filter(|l| l.0 != me).min_by_key(|l| (l.1, l.0))?;
        let gap = mine - dest_load;
        let excess = mine as f64 - fair;
        let shard = self.shard();
        let cooldown = Duration::from_millis(self.tuning.move_cooldown_ms);
        shard
            .owned_entries()
            .into_iter()
            .filter(|e| !shard.is_frozen(e.subhead()))
            .filter(|e| shard.sublist_age(e.key_min()).is_none_or(|age| age >= cooldown))
            .map(|e| (size_of(shard, &e), e))
            .filter(|(s, _)| *s > 0 && *s < gap)
            .min_by(|a, b| (a.0 as f64 - excess).abs().total_cmp(&(b.0 as f64 - excess).abs()))
            .map(|(_, e)| (e, dest))
    }
}

fn size_of(shard: &Shard, e: &Entry) -> i64 {
    shard.arena.pair(e.pair()).size.load(SeqCst)
}

/// Last unmarked client node with a key below `bound`.
fn live_predecessor(shard: &Shard, e: &Entry, bound: Key) -> Option<NodeRef> {
    let _guard = crossbeam::epoch::pin();
    let mut best = None;
    let mut curr = shard.arena.load_next(e.subhead()).unmarked();
    while curr != e.subtail() && shard.is_local(curr) {
        let next = shard.arena.load_next(curr);
        let k = shard.node(curr).key();
        if k >= bound && is_client_key(k) {
            break;
        }
        if is_client_key(k) && !next.is_marked() {
            best = Some(curr);
        }
        curr = next.unmarked();
    }
    best
}
