//! Read-only walks over a shard's sublists.

use std::sync::atomic::Ordering::SeqCst;

use crate::node::{is_client_key, Key, NodeRef, ServerId, Timestamp};
use crate::registry::Entry;
use crate::shard::Shard;

/// A node as seen by structure comparisons: (sid, ts, key, marked).
pub type NodeView = (ServerId, Timestamp, Key, bool);

/// Every node strictly between `sh` and `st`, marked ones included.
pub fn structure(s: &Shard, sh: NodeRef, st: NodeRef) -> Vec<NodeView> {
    let _guard = crossbeam::epoch::pin();
    let mut out = Vec::new();
    let mut curr = s.arena.load_next(sh).unmarked();
    while curr != st && s.is_local(curr) {
        let next = s.arena.load_next(curr);
        let n = s.node(curr);
        out.push((n.sid(), n.ts(), n.key(), next.is_marked()));
        curr = next.unmarked();
    }
    out
}

/// Unmarked client keys of one sublist.
pub fn keys_of(s: &Shard, e: &Entry) -> Vec<Key> {
    structure(s, e.subhead(), e.subtail())
        .into_iter()
        .filter(|n| !n.3 && is_client_key(n.2))
        .map(|n| n.2)
        .collect()
}

/// Unmarked client nodes of one sublist, in list order.
pub fn client_nodes(s: &Shard, e: &Entry) -> Vec<NodeRef> {
    let _guard = crossbeam::epoch::pin();
    let mut out = Vec::new();
    let mut curr = s.arena.load_next(e.subhead()).unmarked();
    while curr != e.subtail() && s.is_local(curr) {
        let next = s.arena.load_next(curr);
        if is_client_key(s.node(curr).key()) && !next.is_marked() {
            out.push(curr);
        }
        curr = next.unmarked();
    }
    out
}

/// Unmarked client keys of every sublist this server owns, ascending.
pub fn owned_keys(s: &Shard) -> Vec<Key> {
    let mut out: Vec<Key> = s.owned_entries().iter().flat_map(|e| keys_of(s, e)).collect();
    out.sort_unstable();
    out
}

/// Compares a moved copy with its source: the unmarked sequences must be
/// equal, and nodes present on both sides must agree on their mark.
/// Marked nodes may already be unlinked on one side only.
pub fn same_structure(src: &[NodeView], dst: &[NodeView]) -> Result<(), String> {
    let live = |v: &[NodeView]| v.iter().filter(|n| !n.3).copied().collect::<Vec<_>>();
    let (a, b) = (live(src), live(dst));
    if a != b {
        let at = a.iter().zip(&b).position(|(x, y)| x != y).unwrap_or(a.len().min(b.len()));
        return Err(format!(
            "live sequences differ at {at}: source {:?} vs copy {:?} ({} vs {} live nodes)",
            a.get(at),
            b.get(at),
            a.len(),
            b.len()
        ));
    }
    for n in src {
        if let Some(m) = dst.iter().find(|m| (m.0, m.1) == (n.0, n.1)) {
            if m != n {
                return Err(format!("node {n:?} is {m:?} in the copy"));
            }
        }
    }
    Ok(())
}

/// (owner, key_min, key_max) of each owned, unfrozen sublist.
pub fn active_ranges(s: &Shard) -> Vec<(ServerId, Key, Key)> {
    s.owned_entries()
        .iter()
        .filter(|e| s.arena.pair(e.pair()).st.load() >= 0)
        .map(|e| (s.id(), e.key_min(), e.key_max()))
        .collect()
}

/// Sum of (start - end) over owned sublists, or None while an update is in
/// flight on any of them.
pub fn quiescent_offset_sum(s: &Shard) -> Option<(i64, i64)> {
    let mut observed = 0;
    let mut recorded = 0;
    for e in s.owned_entries() {
        let p = s.arena.pair(e.pair());
        let end = p.end.load();
        let st = p.st.load();
        if p.end.load() != end || st - end != e.offset() || p.size.load(SeqCst) < 0 {
            return None;
        }
        observed += st - end;
        recorded += e.offset();
    }
    Some((observed, recorded))
}
