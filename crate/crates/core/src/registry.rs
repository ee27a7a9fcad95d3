//! Per-server partitioning index.
//!
//! A registry is a sorted, copy-on-write array of [`Entry`] handles. Lookups
//! load the current snapshot and binary search it without taking locks;
//! mutations copy the array, publish the copy atomically and leave the old
//! one to be reclaimed once the last reader drops its guard.

use std::fmt;
use std::sync::atomic::{AtomicI64, AtomicU64, Ordering::SeqCst};
use std::sync::Arc;

use arc_swap::ArcSwap;
use parking_lot::Mutex;
use thiserror::Error;

use crate::node::{Key, NodeRef, PairId, ServerId, SH_KEY, ST_KEY};

/// Default snapshot capacity.
pub const MAX_SUBLISTS: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegistryError {
    #[error("registry full ({0} entries)")]
    Capacity(usize),
    #[error("an entry starting at key {0} already exists")]
    Duplicate(Key),
}

/// Registry record for one sublist. Entries created from remote
/// announcements carry a NULL subtail and no counter pair; they are only
/// used for routing.
pub struct Entry {
    subhead: AtomicU64,
    subtail: AtomicU64,
    key_min: Key,
    key_max: AtomicI64,
    pair: AtomicU64,
    offset: AtomicI64,
}

impl Entry {
    pub fn new(subhead: NodeRef, subtail: NodeRef, key_min: Key, key_max: Key, pair: PairId, offset: i64) -> Arc<Entry> {
        assert!(key_min < key_max, "empty range ({key_min}, {key_max}]");
        Arc::new(Entry {
            subhead: AtomicU64::new(subhead.raw()),
            subtail: AtomicU64::new(subtail.raw()),
            key_min,
            key_max: AtomicI64::new(key_max),
            pair: AtomicU64::new(pair.0),
            offset: AtomicI64::new(offset),
        })
    }

    pub fn routing(subhead: NodeRef, key_min: Key, key_max: Key) -> Arc<Entry> {
        Entry::new(subhead, NodeRef::NULL, key_min, key_max, PairId::NONE, 0)
    }

    pub fn subhead(&self) -> NodeRef {
        NodeRef::from_raw(self.subhead.load(SeqCst))
    }

    pub fn subtail(&self) -> NodeRef {
        NodeRef::from_raw(self.subtail.load(SeqCst))
    }

    pub fn key_min(&self) -> Key {
        self.key_min
    }

    pub fn key_max(&self) -> Key {
        self.key_max.load(SeqCst)
    }

    pub fn pair(&self) -> PairId {
        PairId(self.pair.load(SeqCst))
    }

    pub fn offset(&self) -> i64 {
        self.offset.load(SeqCst)
    }

    /// True if `key` falls in `(key_min, key_max]`.
    pub fn covers(&self, key: Key) -> bool {
        self.key_min < key && key <= self.key_max()
    }

    /// True if `server` holds the live sublist for this entry.
    pub fn is_owned_by(&self, server: ServerId) -> bool {
        let sh = self.subhead();
        !sh.is_null() && sh.server() == server && !self.pair().is_none()
    }

    pub fn set_key_max(&self, key: Key) {
        self.key_max.store(key, SeqCst)
    }

    pub fn set_subhead(&self, subhead: NodeRef) {
        self.subhead.store(subhead.raw(), SeqCst)
    }

    pub fn set_subtail(&self, subtail: NodeRef) {
        self.subtail.store(subtail.raw(), SeqCst)
    }

    pub fn set_pair(&self, pair: PairId) {
        self.pair.store(pair.0, SeqCst)
    }

    pub fn set_offset(&self, offset: i64) {
        self.offset.store(offset, SeqCst)
    }
}

impl fmt::Debug for Entry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Entry({}, {}] sh={:?} st={:?} pair={} off={}",
            self.key_min,
            self.key_max(),
            self.subhead(),
            self.subtail(),
            self.pair().0,
            self.offset()
        )
    }
}

/// Field changes applied by [`Registry::update_entry_fields`].
#[derive(Clone, Copy, Debug, Default)]
pub struct EntryUpdate {
    pub key_max: Option<Key>,
    pub subhead: Option<NodeRef>,
    pub subtail: Option<NodeRef>,
    pub offset: Option<i64>,
    pub pair: Option<PairId>,
}

/// Immutable published view of the registry.
#[derive(Default)]
pub struct Snapshot {
    entries: Vec<Arc<Entry>>,
}

impl Snapshot {
    pub fn entries(&self) -> &[Arc<Entry>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Binary search for the entry whose `(key_min, key_max]` contains `key`.
    pub fn get_by_key(&self, key: Key) -> Option<&Arc<Entry>> {
        let (mut lo, mut hi) = (0, self.entries.len());
        while lo < hi {
            let mid = (lo + hi) / 2;
            let e = &self.entries[mid];
            if key <= e.key_min {
                hi = mid;
            } else if key > e.key_max() {
                lo = mid + 1;
            } else {
                return Some(e);
            }
        }
        None
    }

    /// Checks that ranges are non-empty, strictly sorted and gap free.
    pub fn check_tiling(&self) -> Result<(), String> {
        for e in &self.entries {
            if e.key_min >= e.key_max() {
                return Err(format!("empty range in {e:?}"));
            }
        }
        for w in self.entries.windows(2) {
            if w[0].key_min >= w[1].key_min {
                return Err(format!("unsorted: {:?} before {:?}", w[0], w[1]));
            }
            if w[0].key_max() != w[1].key_min {
                return Err(format!("gap or overlap between {:?} and {:?}", w[0], w[1]));
            }
        }
        Ok(())
    }

    /// Tiling plus full coverage of the client key domain.
    pub fn check_total(&self) -> Result<(), String> {
        self.check_tiling()?;
        match (self.entries.first(), self.entries.last()) {
            (Some(f), Some(l)) if f.key_min == SH_KEY && l.key_max() == ST_KEY => Ok(()),
            _ => Err("registry does not cover the whole key domain".into()),
        }
    }
}

/// Copy-on-write registry with a single writer at a time.
pub struct Registry {
    current: ArcSwap<Snapshot>,
    writer: Mutex<()>,
    capacity: usize,
    publications: AtomicU64,
}

impl Default for Registry {
    fn default() -> Self {
        Registry::with_capacity(MAX_SUBLISTS)
    }
}

impl Registry {
    pub fn with_capacity(capacity: usize) -> Self {
        Registry {
            current: ArcSwap::from_pointee(Snapshot::default()),
            writer: Mutex::new(()),
            capacity,
            publications: AtomicU64::new(0),
        }
    }

    /// Entries are shared between snapshots and narrowed in place after
    /// the snapshot holding their new neighbour is published, so a miss on
    /// an older snapshot is retried while newer ones keep appearing.
    pub fn get_by_key(&self, key: Key) -> Option<Arc<Entry>> {
        loop {
            let seen = self.publications.load(SeqCst);
            if let Some(e) = self.current.load().get_by_key(key) {
                return Some(Arc::clone(e));
            }
            if self.publications.load(SeqCst) == seen {
                return None;
            }
        }
    }

    /// Current snapshot; stays valid for as long as the caller holds it.
    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.current.load_full()
    }

    pub fn len(&self) -> usize {
        self.current.load().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn publications(&self) -> u64 {
        self.publications.load(SeqCst)
    }

    fn publish(&self, entries: Vec<Arc<Entry>>) {
        self.current.store(Arc::new(Snapshot { entries }));
        self.publications.fetch_add(1, SeqCst);
    }

    /// Inserts `entry` at its sorted position.
    pub fn add_entry(&self, entry: Arc<Entry>) -> Result<(), RegistryError> {
        let _w = self.writer.lock();
        let cur = self.current.load();
        if cur.len() >= self.capacity {
            return Err(RegistryError::Capacity(self.capacity));
        }
        let at = cur.entries.partition_point(|e| e.key_min < entry.key_min);
        if cur.entries.get(at).is_some_and(|e| e.key_min == entry.key_min) {
            return Err(RegistryError::Duplicate(entry.key_min));
        }
        let mut next = Vec::with_capacity(cur.len() + 1);
        next.extend_from_slice(&cur.entries[..at]);
        next.push(entry);
        next.extend_from_slice(&cur.entries[at..]);
        self.publish(next);
        Ok(())
    }

    /// Removes `entry`; returns false (and changes nothing) if it is absent.
    pub fn remove_entry(&self, entry: &Arc<Entry>) -> bool {
        let _w = self.writer.lock();
        let cur = self.current.load();
        let Some(at) = cur.entries.iter().position(|e| Arc::ptr_eq(e, entry)) else {
            log::warn!("remove_entry: {entry:?} not present");
            return false;
        };
        let mut next = cur.entries.to_vec();
        next.remove(at);
        self.publish(next);
        true
    }

    /// Updates entry fields under the writer lock. Fields are atomics, so
    /// concurrent readers see either the old or the new word.
    pub fn update_entry_fields(&self, entry: &Entry, update: EntryUpdate) {
        let _w = self.writer.lock();
        if let Some(k) = update.key_max {
            entry.set_key_max(k);
        }
        if let Some(sh) = update.subhead {
            entry.set_subhead(sh);
        }
        if let Some(st) = update.subtail {
            entry.set_subtail(st);
        }
        if let Some(o) = update.offset {
            entry.set_offset(o);
        }
        if let Some(p) = update.pair {
            entry.set_pair(p);
        }
    }

    /// Entry whose range starts exactly at `key_min`.
    pub fn entry_starting_at(&self, key_min: Key) -> Option<Arc<Entry>> {
        let cur = self.current.load();
        let at = cur.entries.partition_point(|e| e.key_min < key_min);
        cur.entries.get(at).filter(|e| e.key_min == key_min).cloned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::thread;

    fn sh(i: u64) -> NodeRef {
        NodeRef::pack(1, i, false)
    }

    fn two_way() -> Registry {
        let r = Registry::default();
        r.add_entry(Entry::routing(sh(1), SH_KEY, 50)).unwrap();
        r.add_entry(Entry::routing(sh(2), 50, ST_KEY)).unwrap();
        r
    }

    #[test]
    fn boundary_is_inclusive_on_key_max() {
        let r = two_way();
        assert_eq!(r.get_by_key(50).unwrap().subhead(), sh(1));
        assert_eq!(r.get_by_key(51).unwrap().subhead(), sh(2));
        assert_eq!(r.get_by_key(-1_000_000).unwrap().subhead(), sh(1));
    }

    #[test]
    fn add_in_sorted_position() {
        let r = Registry::default();
        r.add_entry(Entry::routing(sh(1), SH_KEY, 100)).unwrap();
        assert_eq!(r.len(), 1);
        r.add_entry(Entry::routing(sh(3), 100, ST_KEY)).unwrap();
        r.get_by_key(10).unwrap().set_key_max(50);
        r.add_entry(Entry::routing(sh(2), 50, 100)).unwrap();
        let s = r.snapshot();
        let mins: Vec<_> = s.entries().iter().map(|e| e.key_min()).collect();
        assert_eq!(mins, vec![SH_KEY, 50, 100]);
        s.check_total().unwrap();
        assert_eq!(r.get_by_key(75).unwrap().subhead(), sh(2));
    }

    #[test]
    fn duplicate_and_capacity_errors() {
        let r = Registry::with_capacity(2);
        r.add_entry(Entry::routing(sh(1), SH_KEY, 0)).unwrap();
        assert_eq!(r.add_entry(Entry::routing(sh(9), SH_KEY, 0)), Err(RegistryError::Duplicate(SH_KEY)));
        r.add_entry(Entry::routing(sh(2), 0, ST_KEY)).unwrap();
        assert_eq!(r.add_entry(Entry::routing(sh(3), 5, 6)), Err(RegistryError::Capacity(2)));
    }

    #[test]
    fn remove_entries() {
        let r = Registry::default();
        let a = Entry::routing(sh(1), SH_KEY, 10);
        let b = Entry::routing(sh(2), 10, 20);
        let c = Entry::routing(sh(3), 20, ST_KEY);
        for e in [&a, &b, &c] {
            r.add_entry(Arc::clone(e)).unwrap();
        }
        assert!(r.remove_entry(&b));
        assert_eq!(r.len(), 2);
        assert_eq!(r.snapshot().entries()[1].key_min(), 20);
        assert!(!r.remove_entry(&b));
        assert!(r.remove_entry(&a));
        assert!(r.remove_entry(&c));
        assert!(r.is_empty());
    }

    #[test]
    fn key_max_update_reroutes() {
        let r = Registry::default();
        let e = Entry::routing(sh(1), SH_KEY, 100);
        r.add_entry(Arc::clone(&e)).unwrap();
        assert!(r.get_by_key(75).is_some());
        r.update_entry_fields(&e, EntryUpdate { key_max: Some(50), ..Default::default() });
        assert!(r.get_by_key(75).is_none());
        r.update_entry_fields(&e, EntryUpdate { subhead: Some(sh(7)), ..Default::default() });
        assert_eq!(e.subhead(), sh(7));
    }

    fn random_registry(rng: &mut ChaCha8Rng) -> Registry {
        let n = rng.random_range(1..=64);
        let mut cuts: Vec<Key> = (0..n - 1).map(|_| rng.random_range(-1000..1000)).collect();
        cuts.sort_unstable();
        cuts.dedup();
        let mut bounds = vec![SH_KEY];
        bounds.extend(cuts);
        bounds.push(ST_KEY);
        let r = Registry::default();
        for (i, w) in bounds.windows(2).enumerate() {
            r.add_entry(Entry::routing(sh(i as u64 + 1), w[0], w[1])).unwrap();
        }
        r
    }

    #[test]
    fn lookup_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let r = random_registry(&mut rng);
            let snap = r.snapshot();
            for _ in 0..100 {
                let key = rng.random_range(-1100..1100);
                let scan = snap.entries().iter().find(|e| e.covers(key)).map(|e| e.subhead());
                assert_eq!(snap.get_by_key(key).map(|e| e.subhead()), scan);
            }
        }
    }

    #[test]
    fn in_place_narrowing_is_invisible_to_registry_lookups() {
        let r = two_way();
        let stale = r.snapshot();
        let left = r.get_by_key(10).unwrap();
        r.add_entry(Entry::routing(sh(3), 20, left.key_max())).unwrap();
        r.update_entry_fields(&left, EntryUpdate { key_max: Some(20), ..Default::default() });
        // a reader still holding the old snapshot sees the narrowed entry
        assert!(stale.get_by_key(30).is_none());
        assert_eq!(r.get_by_key(30).unwrap().subhead(), sh(3));
    }

    #[test]
    fn readers_see_old_or_new_snapshot() {
        let r = Arc::new(two_way());
        let reader = {
            let r = Arc::clone(&r);
            thread::spawn(move || {
                for i in 0..20_000 {
                    let key = (i % 3000) as Key;
                    let e = r.get_by_key(key).expect("total coverage");
                    assert!(e.key_min() < key);
                }
            })
        };
        // split the right range repeatedly (add first, then truncate, so no
        // published snapshot ever has a gap)
        let mut left = r.get_by_key(51).unwrap();
        for k in (60..3000).step_by(3).take(1000) {
            let e = Entry::routing(sh(k as u64), k, left.key_max());
            r.add_entry(Arc::clone(&e)).unwrap();
            left.set_key_max(k);
            left = e;
        }
        reader.join().unwrap();
        r.snapshot().check_total().unwrap();
    }

    #[test]
    fn subhead_updates_are_atomic_words() {
        let e = Entry::routing(sh(1), SH_KEY, ST_KEY);
        let e2 = Arc::clone(&e);
        let t = thread::spawn(move || {
            for _ in 0..10_000 {
                let v = e2.subhead();
                assert!(v.server() == 1 && (1..=10_000).contains(&v.slot()), "{v:?}");
            }
        });
        for i in 1..=10_000 {
            e.set_subhead(sh(i));
        }
        t.join().unwrap();
    }
}
