//! Recording client histories for linearizability checking.

use std::sync::atomic::{AtomicU64, Ordering::SeqCst};

use crossbeam::queue::SegQueue;

use crate::node::Key;
use crate::transport::OpKind;

/// One completed (or abandoned) client operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HistoryEvent {
    pub client: u32,
    pub kind: OpKind,
    pub key: Key,
    pub invoke: u64,
    /// `u64::MAX` when the operation never returned.
    pub response: u64,
    /// None when the outcome is unknown (error or no response); such an
    /// operation may or may not have taken effect.
    pub result: Option<bool>,
}

impl HistoryEvent {
    pub fn is_complete(&self) -> bool {
        self.result.is_some()
    }
}

/// Lock-free append log with a global logical clock.
#[derive(Default)]
pub struct Recorder {
    tick: AtomicU64,
    events: SegQueue<HistoryEvent>,
}

impl Recorder {
    pub fn new() -> Recorder {
        Recorder::default()
    }

    /// Timestamp for an invocation. Call right before issuing the op.
    pub fn invoke(&self) -> u64 {
        self.tick.fetch_add(1, SeqCst)
    }

    /// Logs the response of an op invoked at `invoke`.
    pub fn respond(&self, client: u32, kind: OpKind, key: Key, invoke: u64, result: Option<bool>) {
        let response = if result.is_some() { self.tick.fetch_add(1, SeqCst) } else { u64::MAX };
        self.events.push(HistoryEvent { client, kind, key, invoke, response, result });
    }

    /// Records `f` as one operation.
    pub fn record<E>(&self, client: u32, kind: OpKind, key: Key, f: impl FnOnce() -> Result<bool, E>) -> Result<bool, E> {
        let t = self.invoke();
        let r = f();
        self.respond(client, kind, key, t, r.as_ref().ok().copied());
        r
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Drains the log, ordered by invocation.
    pub fn take(&self) -> Vec<HistoryEvent> {
        let mut out = Vec::with_capacity(self.events.len());
        while let Some(e) = self.events.pop() {
            out.push(e);
        }
        out.sort_by_key(|e| e.invoke);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;
    use std::thread;

    #[test]
    fn ticks_order_invocations_before_responses() {
        let r = Arc::new(Recorder::new());
        let hs: Vec<_> = (0..4)
            .map(|c| {
                let r = Arc::clone(&r);
                thread::spawn(move || {
                    for k in 0..100 {
                        r.record::<()>(c, OpKind::Insert, k, || Ok(k % 2 == 0)).unwrap();
                    }
                })
            })
            .collect();
        hs.into_iter().for_each(|h| h.join().unwrap());
        let h = r.take();
        assert_eq!(h.len(), 400);
        assert!(h.iter().all(|e| e.invoke < e.response));
        assert!(h.windows(2).all(|w| w[0].invoke < w[1].invoke));
        let mut ticks: Vec<u64> = h.iter().flat_map(|e| [e.invoke, e.response]).collect();
        ticks.sort_unstable();
        ticks.dedup();
        assert_eq!(ticks.len(), 800);
    }

    #[test]
    fn failed_ops_have_unknown_outcome() {
        let r = Recorder::new();
        let _ = r.record(0, OpKind::Remove, 3, || Err::<bool, _>("down"));
        let e = r.take()[0];
        assert_eq!((e.result, e.response), (None, u64::MAX));
    }
}
