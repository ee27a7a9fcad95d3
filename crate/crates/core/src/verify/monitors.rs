//! Read-only counter snapshots across a cluster and the breach rules
//! applied to them.

use std::sync::atomic::Ordering::SeqCst;

use crate::runtime::{Cluster, HOP_BUCKETS, MAX_HOPS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub hops: [u64; HOP_BUCKETS],
    pub hop_breaches: u64,
    pub client_errors: u64,
    pub sign_violations: u64,
    pub maintenance_waits: u64,
    pub drain_waits: u64,
    pub splits: u64,
    pub moves: u64,
    pub aborted_moves: u64,
    pub merges: u64,
}

impl Counters {
    pub fn collect(c: &Cluster) -> Counters {
        let mut t = Counters::default();
        for s in &c.servers {
            for (a, b) in t.hops.iter_mut().zip(s.stats.hop_histogram()) {
                *a += b;
            }
            t.hop_breaches += s.stats.hop_breaches.load(SeqCst);
            t.client_errors += s.stats.client_errors.load(SeqCst);
            let st = &s.shard().stats;
            t.sign_violations += st.sign_violations.load(SeqCst);
            t.maintenance_waits += st.maintenance_waits.load(SeqCst);
            t.drain_waits += st.drain_waits.load(SeqCst);
            t.splits += st.splits.load(SeqCst);
            t.moves += st.moves.load(SeqCst);
            t.aborted_moves += st.aborted_moves.load(SeqCst);
            t.merges += st.merges.load(SeqCst);
        }
        t
    }

    /// Counter growth since `before`.
    pub fn since(&self, before: &Counters) -> Counters {
        Counters {
            hops: std::array::from_fn(|i| self.hops[i] - before.hops[i]),
            hop_breaches: self.hop_breaches - before.hop_breaches,
            client_errors: self.client_errors - before.client_errors,
            sign_violations: self.sign_violations - before.sign_violations,
            maintenance_waits: self.maintenance_waits - before.maintenance_waits,
            drain_waits: self.drain_waits - before.drain_waits,
            splits: self.splits - before.splits,
            moves: self.moves - before.moves,
            aborted_moves: self.aborted_moves - before.aborted_moves,
            merges: self.merges - before.merges,
        }
    }

    /// Largest hop count observed (0 if no routed op).
    pub fn max_hops(&self) -> u8 {
        self.hops.iter().rposition(|&n| n > 0).map_or(0, |i| i as u8 + 1)
    }

    /// Named monitor failures.
    pub fn breaches(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.hop_breaches > 0 || self.max_hops() > MAX_HOPS {
            out.push(format!("hop bound: {} ops needed more than {MAX_HOPS} servers", self.hop_breaches));
        }
        if self.sign_violations > 0 {
            out.push(format!("sign property: {} updates landed on a frozen sublist", self.sign_violations));
        }
        if self.maintenance_waits > 0 {
            out.push(format!("client progress: {} client waits on maintenance", self.maintenance_waits));
        }
        out
    }
}

/// Registry tiling on every server.
pub fn registry_breaches(c: &Cluster) -> Vec<String> {
    c.servers
        .iter()
        .filter_map(|s| s.shard().registry.snapshot().check_total().err().map(|e| format!("registry on server {}: {e}", s.id())))
        .collect()
}
