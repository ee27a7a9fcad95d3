//! Merge of two adjacent sublists held by the same server.

use std::sync::atomic::Ordering::SeqCst;
use std::sync::Arc;

use crossbeam::epoch;

use super::BackgroundError;
use crate::node::{Key, NodeRef};
use crate::rdcss::rdcss;
use crate::registry::{Entry, EntryUpdate};
use crate::shard::{Shard, Stats};
use crate::transport::Message;

impl Shard {
    /// Folds `right` into `left`. Both must be served here, adjacent and
    /// not moving. Returns the widened left entry.
    pub fn merge(&self, left: &Arc<Entry>, right: &Arc<Entry>) -> Result<Arc<Entry>, BackgroundError> {
        let _bg = self.lock_background();
        if !self.owned(left) || !self.owned(right) {
            return Err(BackgroundError::Precondition("merge of sublists not served here"));
        }
        if left.key_max() != right.key_min() {
            return Err(BackgroundError::Precondition("merge of non-adjacent sublists"));
        }
        let (lsh, lst, lpid) = (left.subhead(), left.subtail(), left.pair());
        let (rsh, rst, rpid) = (right.subhead(), right.subtail(), right.pair());
        if self.is_frozen(lsh) || self.is_frozen(rsh) {
            return Err(BackgroundError::Precondition("merge of a moving sublist"));
        }
        if self.arena.load_next(lst) != rsh {
            return Err(BackgroundError::Precondition("left subtail does not lead to right subhead"));
        }
        let boundary = right.key_min();

        self.registry.update_entry_fields(
            left,
            EntryUpdate { key_max: Some(right.key_max()), subtail: Some(rst), ..Default::default() },
        );
        self.registry.remove_entry(right);
        self.retarget(rsh, rst, rpid, right.offset(), lpid)?;

        // Searchers delink marked sentinels like any other node; the RDCSS
        // below removes both in one step when it wins.
        mark(self, lst);
        mark(self, rsh);
        self.unlink_interior(lsh, lst, rsh, boundary)?;

        left.set_offset(left.offset() + right.offset());
        let moved = self.arena.pair(rpid).size.swap(0, SeqCst);
        self.arena.pair(lpid).size.fetch_add(moved, SeqCst);
        self.arrivals.lock().remove(&boundary);
        self.broadcast(Message::RegisterMerged { key_mid: boundary }, &[], "register merged")?;
        Stats::bump(&self.stats.merges);
        log::debug!("server {}: merged at {boundary}", self.id());
        Ok(Arc::clone(left))
    }

    /// Swings the last live node before the interior subtail past both
    /// interior sentinels to the first live right-half node.
    fn unlink_interior(&self, lsh: NodeRef, lst: NodeRef, rsh: NodeRef, boundary: Key) -> Result<(), BackgroundError> {
        loop {
            let guard = epoch::pin();
            let Some((p, dead)) = self.interior_pred(lsh, lst, rsh, boundary) else { return Ok(()) };
            // first unmarked node after the right subhead
            let mut first = self.arena.load_next(rsh).unmarked();
            let mut first_next = self.arena.load_next(first);
            while first_next.is_marked() {
                first = first_next.unmarked();
                first_next = self.arena.load_next(first);
            }
            if rdcss(&self.arena, p, dead, first, first_next, first)? {
                self.arena.retire(lst, &guard);
                return Ok(());
            }
            self.check_cancelled()?;
            drop(guard);
            std::thread::yield_now();
        }
    }

    /// Predecessor of whichever interior sentinel is still linked, together
    /// with that sentinel. None once both are gone.
    fn interior_pred(&self, lsh: NodeRef, lst: NodeRef, rsh: NodeRef, boundary: Key) -> Option<(NodeRef, NodeRef)> {
        let mut p = lsh;
        loop {
            let w = self.arena.load_next(p);
            let c = w.unmarked();
            if c == lst || c == rsh {
                if w.is_marked() {
                    // p itself is being deleted; let a searcher delink it
                    let guard = epoch::pin();
                    let _ = self.search(boundary, lsh, &guard);
                    p = lsh;
                    continue;
                }
                return Some((p, c));
            }
            if !self.is_local(c) {
                return None;
            }
            let k = self.node(c).key();
            if k > boundary && crate::node::is_client_key(k) {
                return None;
            }
            p = c;
        }
    }
}

/// Sets the mark bit of `r.next`.
fn mark(shard: &Shard, r: NodeRef) {
    loop {
        let w = shard.arena.load_next(r);
        if w.is_marked() || shard.arena.link_cas(r, w, w.marked()) {
            return;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::background::testkit::{cluster, keys_of, quiescent_offsets};
    use crate::background::SplitOutcome;
    use crate::node::{ST_KEY, SH_KEY};
    use crate::sublist::OpResult;
    use rand::{Rng, SeedableRng};
    use std::collections::BTreeSet;
    use std::thread;

    fn sentinels_between(s: &Shard, e: &Entry) -> usize {
        let mut n = 0;
        let mut curr = s.arena.load_next(e.subhead()).unmarked();
        while curr != e.subtail() {
            let k = s.node(curr).key();
            if k == SH_KEY || k == ST_KEY {
                n += 1;
            }
            curr = s.arena.load_next(curr).unmarked();
        }
        n
    }

    #[test]
    fn split_then_merge_round_trip() {
        let c = cluster(2);
        let s = &c.shards[0];
        for k in [-90, -50, -10] {
            s.insert(k).unwrap();
        }
        let e = s.registry.get_by_key(-50).unwrap();
        let p = s.split_point(&e).unwrap();
        let SplitOutcome::NewEntry(right) = s.split(&e, p).unwrap() else { panic!() };
        assert_eq!(c.shards[1].registry.len(), 3);
        let merged = s.merge(&e, &right).unwrap();
        assert_eq!(merged.key_max(), 0);
        assert_eq!(keys_of(s, &merged), vec![-90, -50, -10]);
        assert_eq!(sentinels_between(s, &merged), 0);
        assert_eq!(s.registry.len(), 2);
        assert_eq!(c.shards[1].registry.len(), 2);
        c.shards[1].registry.snapshot().check_total().unwrap();
        assert_eq!(s.find(-10).unwrap(), OpResult::Done(true));
        assert_eq!(s.insert(-20).unwrap(), OpResult::Done(true));
        assert_eq!(quiescent_offsets(s), vec![0]);
        // duplicate delivery is a no-op
        let n = c.shards[1].registry.len();
        c.shards[1].handle_background(Message::RegisterMerged { key_mid: -50 });
        assert_eq!(c.shards[1].registry.len(), n);
        c.shutdown();
    }

    #[test]
    fn merge_rejects_non_adjacent() {
        let c = cluster(1);
        let s = &c.shards[0];
        for k in 0..9 {
            s.insert(k).unwrap();
        }
        let e = s.registry.get_by_key(0).unwrap();
        let SplitOutcome::NewEntry(mid) = s.split(&e, s.split_point(&e).unwrap()).unwrap() else { panic!() };
        let SplitOutcome::NewEntry(last) = s.split(&mid, s.split_point(&mid).unwrap()).unwrap() else { panic!() };
        assert!(matches!(s.merge(&e, &last), Err(BackgroundError::Precondition(_))));
        assert_eq!(s.registry.len(), 3);
    }

    #[test]
    fn fuzzed_split_merge_cycles_preserve_keys_under_updates() {
        let c = cluster(1);
        let s = Arc::clone(&c.shards[0]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let fixed: BTreeSet<i64> = (0..300).map(|_| rng.random_range(-1000..1000) * 2).collect();
        for &k in &fixed {
            s.insert(k).unwrap();
        }
        // concurrent churn on odd keys only, so the even set is an oracle
        let stop = Arc::new(std::sync::atomic::AtomicBool::new(false));
        let churn: Vec<_> = (0..2)
            .map(|t| {
                let (s, stop) = (Arc::clone(&s), Arc::clone(&stop));
                thread::spawn(move || {
                    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(t);
                    while !stop.load(SeqCst) {
                        let k = r.random_range(-1000..1000) * 2 + 1;
                        if r.random_bool(0.5) {
                            s.insert(k).unwrap();
                        } else {
                            s.remove(k).unwrap();
                        }
                    }
                })
            })
            .collect();
        for _ in 0..30 {
            let entries = s.owned_entries();
            let i = rng.random_range(0..entries.len());
            let Some(p) = s.split_point(&entries[i]) else { continue };
            let SplitOutcome::NewEntry(right) = s.split(&entries[i], p).unwrap() else { continue };
            if rng.random_bool(0.7) {
                s.merge(&entries[i], &right).unwrap();
            }
        }
        stop.store(true, SeqCst);
        churn.into_iter().for_each(|h| h.join().unwrap());
        let all: Vec<i64> = s.owned_entries().iter().flat_map(|e| keys_of(&s, e)).collect();
        assert!(all.windows(2).all(|w| w[0] < w[1]));
        let evens: BTreeSet<i64> = all.iter().copied().filter(|k| k % 2 == 0).collect();
        assert_eq!(evens, fixed);
        assert!(quiescent_offsets(&s).iter().all(|&o| o == 0));
        s.registry.snapshot().check_total().unwrap();
    }
}
