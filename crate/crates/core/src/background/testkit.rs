//! Small in-process clusters for unit tests of maintenance operations.

use std::sync::Arc;
use std::time::Duration;

use crate::node::{is_client_key, Key};
use crate::registry::Entry;
use crate::shard::{even_partition, Shard};
use crate::sublist::OpResult;
use crate::transport::loopback::LoopbackNet;
use crate::transport::message::code;
use crate::transport::{DeliveryPolicy, Handler, Message};

struct Peer(Arc<Shard>);

impl Handler for Peer {
    fn handle(&self, msg: Message) -> Message {
        match msg {
            Message::Client { kind, key, subhead, hops } => match self.0.client_op(kind, key, subhead) {
                Ok(OpResult::Done(value)) => Message::BoolResp { value, hops },
                _ => Message::error(code::UNAVAILABLE),
            },
            other => self.0.handle_background(other),
        }
    }
}

pub(crate) struct TestCluster {
    pub shards: Vec<Arc<Shard>>,
    pub net: LoopbackNet,
}

impl TestCluster {
    pub fn shutdown(&self) {
        assert!(self.net.wait_idle(Duration::from_secs(30)));
        self.net.shutdown();
    }
}

pub(crate) fn cluster_with(n: u16, policy: DeliveryPolicy) -> TestCluster {
    let net = LoopbackNet::new(policy);
    let ids: Vec<u16> = (0..n).collect();
    let map = even_partition(&ids, -100, 100);
    let shards: Vec<_> = ids
        .iter()
        .map(|&id| {
            let s = Shard::new(id, 1 << 18);
            s.install_partition(&map).unwrap();
            net.register(id, Arc::new(Peer(Arc::clone(&s))));
            s.attach_network(net.endpoint(id));
            s
        })
        .collect();
    TestCluster { shards, net }
}

pub(crate) fn cluster(n: u16) -> TestCluster {
    cluster_with(n, DeliveryPolicy::default())
}

/// Unmarked client keys of the sublist described by `e`.
pub(crate) fn keys_of(s: &Shard, e: &Entry) -> Vec<Key> {
    let mut out = Vec::new();
    let mut curr = s.arena.load_next(e.subhead()).unmarked();
    while curr != e.subtail() && s.is_local(curr) {
        let next = s.arena.load_next(curr);
        let k = s.node(curr).key();
        if is_client_key(k) && !next.is_marked() {
            out.push(k);
        }
        curr = next.unmarked();
    }
    out
}

pub(crate) fn quiescent_offsets(s: &Shard) -> Vec<i64> {
    s.owned_entries()
        .iter()
        .map(|e| {
            assert_eq!(s.arena.pair(e.pair()).delta(), e.offset(), "not quiescent: {e:?}");
            e.offset()
        })
        .collect()
}

/// Runs a client operation starting at server `from`, following
/// delegations across the cluster until it completes.
pub(crate) fn run(c: &TestCluster, from: usize, kind: crate::transport::OpKind, key: Key) -> bool {
    let mut at = from;
    let mut res = c.shards[at].client_op(kind, key, crate::node::NodeRef::NULL).unwrap();
    for _ in 0..10_000 {
        res = match res {
            OpResult::Done(v) => return v,
            OpResult::Delegate { server, subhead } => {
                at = server as usize;
                c.shards[at].client_op(kind, key, subhead).unwrap()
            }
            OpResult::DelegateDelete { server, node } => {
                at = server as usize;
                c.shards[at].delete_at(node, key).unwrap()
            }
        };
    }
    panic!("operation on {key} never settled");
}

/// (sid, ts, key, marked) of every node strictly inside a sublist.
pub(crate) fn structure_of(s: &Shard, sh: crate::node::NodeRef, st: crate::node::NodeRef) -> Vec<(u16, u64, Key, bool)> {
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
