use std::sync::atomic::Ordering::SeqCst;
use std::sync::Arc;

use super::BackgroundError;
use crate::node::{is_client_key, NodeInit, NodeRef, ST_KEY, SH_KEY};
use crate::registry::{Entry, EntryUpdate};
use crate::shard::{Shard, Stats};
use crate::transport::Message;

#[derive(Clone, Debug)]
pub enum SplitOutcome {
    /// The new right-hand entry.
    NewEntry(Arc<Entry>),
    /// The split node was deleted before the new sentinels went in.
    Failed,
}

impl Shard {
    /// The ⌈n/2⌉-th unmarked node of an owned sublist of n items, if the
    /// sublist has at least two.
    pub fn split_point(&self, entry: &Entry) -> Option<NodeRef> {
        let n = self.count_between(entry.subhead(), entry.subtail());
        if n < 2 {
            return None;
        }
        let _guard = crossbeam::epoch::pin();
        let target = (n + 1) / 2;
        let mut seen = 0;
        let mut curr = self.arena.load_next(entry.subhead()).unmarked();
        while curr != entry.subtail() && self.is_local(curr) {
            let next = self.arena.load_next(curr);
            if is_client_key(self.node(curr).key()) && !next.is_marked() {
                seen += 1;
                if seen == target {
                    return Some(curr);
                }
            }
            curr = next.unmarked();
        }
        None
    }

    /// Splits an owned sublist after `split_node`, which becomes the last
    /// item of the left half.
    pub fn split(&self, entry: &Arc<Entry>, split_node: NodeRef) -> Result<SplitOutcome, BackgroundError> {
        let _bg = self.lock_background();
        if !self.owned(entry) || self.is_frozen(entry.subhead()) {
            return Err(BackgroundError::Precondition("split of a sublist not served here"));
        }
        if !self.is_local(split_node) {
            return Err(BackgroundError::Precondition("split node is remote"));
        }
        let skey = self.node(split_node).key();
        if !is_client_key(skey) || !entry.covers(skey) || skey == entry.key_max() {
            return Err(BackgroundError::Precondition("split key outside the sublist"));
        }
        let old_pid = self.node(split_node).pair();
        if old_pid != entry.pair() {
            return Err(BackgroundError::Precondition("split node belongs to another sublist"));
        }
        let new_pid = self.arena.alloc_pair()?;
        let me = self.id();
        let alloc = |init| self.arena.alloc_node(init);
        let new_st = match alloc(NodeInit {
            key_max: skey,
            ..NodeInit::item(ST_KEY, self.clock.next_timestamp(), me, NodeRef::NULL, old_pid)
        }) {
            Ok(r) => r,
            Err(e) => {
                self.arena.free_pair(new_pid);
                return Err(e.into());
            }
        };
        let new_sh = match alloc(NodeInit::item(SH_KEY, self.clock.next_timestamp(), me, NodeRef::NULL, new_pid)) {
            Ok(r) => r,
            Err(e) => {
                self.arena.free_unpublished(new_st);
                self.arena.free_pair(new_pid);
                return Err(e.into());
            }
        };
        self.node(new_st).store_next(new_sh);
        loop {
            let succ = self.arena.load_next(split_node);
            if succ.is_marked() {
                self.arena.free_unpublished(new_sh);
                self.arena.free_unpublished(new_st);
                self.arena.free_pair(new_pid);
                Stats::bump(&self.stats.failed_splits);
                return Ok(SplitOutcome::Failed);
            }
            self.node(new_sh).store_next(succ);
            self.node(new_sh).set_ts(self.clock.next_timestamp());
            if self.arena.link_cas(split_node, succ, new_st) {
                break;
            }
        }
        self.node(new_st).pin();
        self.node(new_sh).pin();

        let subtail = entry.subtail();
        self.retarget(new_sh, subtail, old_pid, entry.offset(), new_pid)?;
        let left_n = self.count_between(entry.subhead(), new_st);
        let right_n = self.count_between(new_sh, subtail);
        self.arena.pair(old_pid).size.store(left_n, SeqCst);
        self.arena.pair(new_pid).size.store(right_n, SeqCst);

        // Both pairs are balanced at this point, so the offsets are the
        // quiescent differences: zero on the new pair and unchanged on the
        // old one.
        let right = Entry::new(new_sh, subtail, skey, entry.key_max(), new_pid, 0);
        self.registry.add_entry(Arc::clone(&right))?;
        self.registry
            .update_entry_fields(entry, EntryUpdate { key_max: Some(skey), subtail: Some(new_st), ..Default::default() });
        self.note_arrival(skey);
        self.broadcast(Message::RegisterSublist { key_min: skey, subhead: new_sh }, &[], "register sublist")?;
        Stats::bump(&self.stats.splits);
        log::debug!("server {me}: split at {skey} ({left_n} | {right_n})");
        Ok(SplitOutcome::NewEntry(right))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::background::testkit::{cluster, keys_of, quiescent_offsets};
    use crate::sublist::OpResult;
    use std::thread;

    fn node_with_key(s: &Shard, e: &Entry, key: i64) -> NodeRef {
        let mut curr = s.arena.load_next(e.subhead());
        while s.node(curr).key() != key {
            curr = s.arena.load_next(curr).unmarked();
        }
        curr
    }

    #[test]
    fn quiescent_split_produces_two_ranges() {
        let c = cluster(1);
        let s = &c.shards[0];
        for k in [5, 9, 12] {
            s.insert(k).unwrap();
        }
        let e = s.registry.get_by_key(5).unwrap();
        let nine = node_with_key(s, &e, 9);
        let SplitOutcome::NewEntry(right) = s.split(&e, nine).unwrap() else { panic!("split failed") };
        assert_eq!((right.key_min(), right.key_max()), (9, i64::MAX));
        assert_eq!(e.key_max(), 9);
        assert_eq!(keys_of(s, &e), vec![5, 9]);
        assert_eq!(keys_of(s, &right), vec![12]);
        assert_eq!((e.offset(), right.offset()), (0, 0));
        assert_eq!(s.arena.pair(right.pair()).size.load(SeqCst), 1);
        s.registry.snapshot().check_total().unwrap();
        assert_eq!(s.find(12).unwrap(), OpResult::Done(true));
        assert_eq!(s.insert(10).unwrap(), OpResult::Done(true));
        assert_eq!(keys_of(s, &right), vec![10, 12]);
    }

    #[test]
    fn split_at_deleted_node_fails() {
        let c = cluster(1);
        let s = &c.shards[0];
        for k in [1, 2, 3] {
            s.insert(k).unwrap();
        }
        let e = s.registry.get_by_key(1).unwrap();
        let two = node_with_key(s, &e, 2);
        s.remove(2).unwrap();
        assert!(matches!(s.split(&e, two).unwrap(), SplitOutcome::Failed));
        assert_eq!(s.registry.len(), 1);
        assert_eq!(Stats::get(&s.stats.failed_splits), 1);
    }

    #[test]
    fn split_is_registered_on_peers() {
        let c = cluster(2);
        let s0 = &c.shards[0];
        for k in [-50, -40, -30] {
            s0.insert(k).unwrap();
        }
        let e = s0.registry.get_by_key(-50).unwrap();
        let p = s0.split_point(&e).unwrap();
        assert_eq!(s0.node(p).key(), -40);
        let SplitOutcome::NewEntry(right) = s0.split(&e, p).unwrap() else { panic!() };
        let s1 = &c.shards[1];
        let routed = s1.registry.get_by_key(-35).unwrap();
        assert_eq!(routed.subhead(), right.subhead());
        assert_eq!(s1.registry.get_by_key(-45).unwrap().key_max(), -40);
        s1.registry.snapshot().check_total().unwrap();
        // duplicate delivery is a no-op
        let before = s1.registry.len();
        s1.handle_background(Message::RegisterSublist { key_min: -40, subhead: right.subhead() });
        assert_eq!(s1.registry.len(), before);
        c.shutdown();
    }

    #[test]
    fn split_under_concurrent_updates_conserves_offsets() {
        let c = cluster(1);
        let s = Arc::clone(&c.shards[0]);
        for k in (0..400).step_by(2) {
            s.insert(k).unwrap();
        }
        let stop = Arc::new(std::sync::atomic::AtomicBool::new(false));
        let workers: Vec<_> = (0..3)
            .map(|t| {
                let (s, stop) = (Arc::clone(&s), Arc::clone(&stop));
                thread::spawn(move || {
                    let mut i = t;
                    while !stop.load(SeqCst) {
                        let k = (i * 37) % 400;
                        if i % 2 == 0 {
                            s.insert(k).unwrap();
                        } else {
                            s.remove(k).unwrap();
                        }
                        i += 3;
                    }
                })
            })
            .collect();
        let before: i64 = quiescent_offsets(&s).iter().sum();
        for _ in 0..20 {
            let entries = s.owned_entries();
            let e = entries.iter().max_by_key(|e| s.count_between(e.subhead(), e.subtail())).unwrap();
            if let Some(p) = s.split_point(e) {
                s.split(e, p).unwrap();
            }
        }
        stop.store(true, SeqCst);
        workers.into_iter().for_each(|h| h.join().unwrap());
        assert_eq!(quiescent_offsets(&s).iter().sum::<i64>(), before);
        for e in s.owned_entries() {
            let pair = s.arena.pair(e.pair());
            assert_eq!(pair.delta(), e.offset());
            // sizes may be off by updates that straddled a recount
            let n = keys_of(&s, &e).len() as i64;
            assert!((pair.size.load(SeqCst) - n).abs() <= 6, "size of {e:?} vs {n}");
            for k in keys_of(&s, &e) {
                assert!(e.covers(k), "{k} outside {e:?}");
            }
        }
        s.registry.snapshot().check_total().unwrap();
    }
}
