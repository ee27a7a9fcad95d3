//! Restricted double-compare single-swap over link words.
//!
//! `rdcss(a1, e1, a2, e2, n1)` sets `*a1 = n1` iff `*a1 == e1` and `*a2 == e2`
//! at a single instant. A descriptor word is installed into `a1` first; any
//! thread that reads a descriptor helps it finish before continuing. The
//! algorithm is written as an explicit step machine over [`LinkMemory`] so the
//! exact same code runs against real atomics and against the interleaving
//! model in [`crate::verify::rdcss_model`].

use std::sync::atomic::{AtomicU64, AtomicU8, Ordering::SeqCst};

use crate::node::{Arena, ArenaError, NodeRef, DESCRIPTOR_SERVER};

pub const UNDECIDED: u8 = 0;
pub const SUCCEEDED: u8 = 1;
pub const FAILED: u8 = 2;

/// Immutable operands of one RDCSS.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DescFields {
    pub addr1: NodeRef,
    pub exp1: NodeRef,
    pub addr2: NodeRef,
    pub exp2: NodeRef,
    pub new1: NodeRef,
}

/// Descriptor storage slot (arena resident).
#[derive(Default)]
pub struct Descriptor {
    addr1: AtomicU64,
    exp1: AtomicU64,
    addr2: AtomicU64,
    exp2: AtomicU64,
    new1: AtomicU64,
    status: AtomicU8,
}

/// The shared-memory operations the algorithm needs. Each call is one atomic
/// step.
pub trait LinkMemory {
    fn load_link(&self, addr: NodeRef) -> NodeRef;
    fn cas_link(&self, addr: NodeRef, current: NodeRef, new: NodeRef) -> Result<NodeRef, NodeRef>;
    /// Operands of the descriptor named by `word` (not a shared-memory step:
    /// descriptors are immutable once published).
    fn descriptor(&self, word: NodeRef) -> DescFields;
    /// Moves the descriptor status from UNDECIDED to `outcome`; returns the
    /// status in place afterwards.
    fn decide(&self, word: NodeRef, outcome: u8) -> u8;
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
enum Phase {
    ReadControl,
    Decide(bool),
    Swap(bool),
}

/// Drives one descriptor to completion (used by the owner and by helpers).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Completer {
    word: NodeRef,
    fields: DescFields,
    phase: Phase,
}

impl Completer {
    pub fn new(word: NodeRef, fields: DescFields) -> Self {
        Completer { word, fields, phase: Phase::ReadControl }
    }

    /// One atomic step; `Some(succeeded)` once the descriptor is removed.
    pub fn step<M: LinkMemory + ?Sized>(&mut self, mem: &M) -> Option<bool> {
        let f = self.fields;
        match self.phase {
            Phase::ReadControl => {
                let v = mem.load_link(f.addr2);
                self.phase = Phase::Decide(v == f.exp2);
                None
            }
            Phase::Decide(ok) => {
                let s = mem.decide(self.word, if ok { SUCCEEDED } else { FAILED });
                self.phase = Phase::Swap(s == SUCCEEDED);
                None
            }
            Phase::Swap(ok) => {
                let _ = mem.cas_link(f.addr1, self.word, if ok { f.new1 } else { f.exp1 });
                Some(ok)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
enum State {
    Install,
    Helping(Completer),
    Completing(Completer),
    Done(bool),
}

/// One RDCSS invocation as a step machine.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RdcssMachine {
    word: NodeRef,
    fields: DescFields,
    state: State,
}

impl RdcssMachine {
    pub fn new(word: NodeRef, fields: DescFields) -> Self {
        debug_assert!(word.is_descriptor());
        RdcssMachine { word, fields, state: State::Install }
    }

    pub fn step<M: LinkMemory + ?Sized>(&mut self, mem: &M) -> Option<bool> {
        match &mut self.state {
            State::Install => {
                self.state = match mem.cas_link(self.fields.addr1, self.fields.exp1, self.word) {
                    Ok(_) => State::Completing(Completer::new(self.word, self.fields)),
                    Err(cur) if cur.is_descriptor() => State::Helping(Completer::new(cur, mem.descriptor(cur))),
                    Err(_) => State::Done(false),
                };
            }
            State::Helping(c) => {
                if c.step(mem).is_some() {
                    self.state = State::Install;
                }
            }
            State::Completing(c) => {
                if let Some(ok) = c.step(mem) {
                    self.state = State::Done(ok);
                }
            }
            State::Done(ok) => return Some(*ok),
        }
        match self.state {
            State::Done(ok) => Some(ok),
            _ => None,
        }
    }

    pub fn run<M: LinkMemory + ?Sized>(mut self, mem: &M) -> bool {
        loop {
            if let Some(ok) = self.step(mem) {
                return ok;
            }
        }
    }
}

/// Descriptor words encode the slot in the reserved descriptor server id.
pub fn descriptor_word(slot: u64) -> NodeRef {
    NodeRef::pack(DESCRIPTOR_SERVER, slot, false)
}

impl LinkMemory for Arena {
    fn load_link(&self, addr: NodeRef) -> NodeRef {
        self.node(addr).next_raw()
    }

    fn cas_link(&self, addr: NodeRef, current: NodeRef, new: NodeRef) -> Result<NodeRef, NodeRef> {
        self.node(addr)
            .cas_next_raw(current.raw(), new.raw())
            .map(NodeRef::from_raw)
            .map_err(NodeRef::from_raw)
    }

    fn descriptor(&self, word: NodeRef) -> DescFields {
        let d = self.descriptors.get(word.slot());
        DescFields {
            addr1: NodeRef::from_raw(d.addr1.load(SeqCst)),
            exp1: NodeRef::from_raw(d.exp1.load(SeqCst)),
            addr2: NodeRef::from_raw(d.addr2.load(SeqCst)),
            exp2: NodeRef::from_raw(d.exp2.load(SeqCst)),
            new1: NodeRef::from_raw(d.new1.load(SeqCst)),
        }
    }

    fn decide(&self, word: NodeRef, outcome: u8) -> u8 {
        let d = self.descriptors.get(word.slot());
        match d.status.compare_exchange(UNDECIDED, outcome, SeqCst, SeqCst) {
            Ok(_) => outcome,
            Err(s) => s,
        }
    }
}

/// Completes the descriptor found in a link word.
pub fn help(arena: &Arena, word: NodeRef) {
    let mut c = Completer::new(word, arena.descriptor(word));
    while c.step(arena).is_none() {}
}

/// Atomically sets `addr1.next = new1` iff `addr1.next == exp1` and
/// `addr2.next == exp2`. All nodes must live in `arena`.
///
/// Descriptor slots are not recycled; merges are rare enough that the
/// descriptor slab is sized as a fraction of the node arena.
pub fn rdcss(
    arena: &Arena,
    addr1: NodeRef,
    exp1: NodeRef,
    addr2: NodeRef,
    exp2: NodeRef,
    new1: NodeRef,
) -> Result<bool, ArenaError> {
    let slot = arena.descriptors.alloc().ok_or(ArenaError::Exhausted {
        server: arena.server(),
        capacity: arena.descriptors.capacity(),
    })?;
    let d = arena.descriptors.get(slot);
    d.addr1.store(addr1.raw(), SeqCst);
    d.exp1.store(exp1.raw(), SeqCst);
    d.addr2.store(addr2.raw(), SeqCst);
    d.exp2.store(exp2.raw(), SeqCst);
    d.new1.store(new1.raw(), SeqCst);
    d.status.store(UNDECIDED, SeqCst);
    let word = descriptor_word(slot);
    let fields = DescFields { addr1, exp1, addr2, exp2, new1 };
    Ok(RdcssMachine::new(word, fields).run(arena))
}
