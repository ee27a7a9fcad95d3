//! Exhaustive interleaving check of the RDCSS step machines over a
//! three-word model memory.
//!
//! Each thread runs a short program of RDCSS, helping CAS and helping read
//! operations. Every atomic step is a scheduling point; the explorer visits
//! every reachable state (deduplicated by hash) and collects terminal
//! outcomes. Each outcome must be produced by some sequential execution that
//! keeps per-thread program order.

use std::cell::Cell;
use std::collections::{BTreeSet, HashSet};

use crate::node::NodeRef;
use crate::rdcss::{descriptor_word, Completer, DescFields, LinkMemory, RdcssMachine, UNDECIDED};

pub const WORDS: usize = 3;

/// A value held in a model word. Values are small integers.
pub type Val = u8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelOp {
    /// `word[a1] = n1` iff `word[a1] == e1 && word[a2] == e2`.
    Rdcss { a1: usize, e1: Val, a2: usize, e2: Val, n1: Val },
    /// CAS that helps any descriptor it meets.
    Cas { a: usize, e: Val, n: Val },
    Read { a: usize },
}

fn addr(i: usize) -> NodeRef {
    NodeRef::pack(0, i as u64 + 1, false)
}

fn val(v: Val) -> NodeRef {
    NodeRef::pack(1, v as u64 + 1, false)
}

fn word_index(a: NodeRef) -> usize {
    a.slot() as usize - 1
}

fn val_of(r: NodeRef) -> Val {
    debug_assert!(!r.is_descriptor());
    (r.slot() - 1) as Val
}

struct Mem<'a> {
    words: [Cell<NodeRef>; WORDS],
    status: Vec<Cell<u8>>,
    fields: &'a [DescFields],
}

impl LinkMemory for Mem<'_> {
    fn load_link(&self, a: NodeRef) -> NodeRef {
        self.words[word_index(a)].get()
    }

    fn cas_link(&self, a: NodeRef, current: NodeRef, new: NodeRef) -> Result<NodeRef, NodeRef> {
        let w = &self.words[word_index(a)];
        let v = w.get();
        if v == current {
            w.set(new);
            Ok(v)
        } else {
            Err(v)
        }
    }

    fn descriptor(&self, word: NodeRef) -> DescFields {
        self.fields[word.slot() as usize]
    }

    fn decide(&self, word: NodeRef, outcome: u8) -> u8 {
        let s = &self.status[word.slot() as usize];
        if s.get() == UNDECIDED {
            s.set(outcome);
        }
        s.get()
    }
}

/// Read or CAS that completes descriptors it encounters.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
enum Helping {
    Load,
    Help(Completer),
    Swap,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
enum Machine {
    Rdcss(RdcssMachine),
    Plain(ModelOp, Helping),
}

impl Machine {
    fn new(op: ModelOp, slot: u64, fields: DescFields) -> Machine {
        match op {
            ModelOp::Rdcss { .. } => Machine::Rdcss(RdcssMachine::new(descriptor_word(slot), fields)),
            _ => Machine::Plain(op, Helping::Load),
        }
    }

    /// One atomic step; the op's result once it completes.
    fn step(&mut self, mem: &Mem<'_>) -> Option<Val> {
        match self {
            Machine::Rdcss(m) => m.step(mem).map(Val::from),
            Machine::Plain(op, h) => {
                let (a, expect) = match *op {
                    ModelOp::Cas { a, e, .. } => (a, Some(e)),
                    ModelOp::Read { a } => (a, None),
                    ModelOp::Rdcss { .. } => unreachable!(),
                };
                match h {
                    Helping::Load => {
                        let v = mem.load_link(addr(a));
                        if v.is_descriptor() {
                            *h = Helping::Help(Completer::new(v, mem.descriptor(v)));
                            return None;
                        }
                        match expect {
                            None => Some(val_of(v)),
                            Some(e) if val_of(v) != e => Some(0),
                            Some(_) => {
                                *h = Helping::Swap;
                                None
                            }
                        }
                    }
                    Helping::Help(c) => {
                        if c.step(mem).is_some() {
                            *h = Helping::Load;
                        }
                        None
                    }
                    Helping::Swap => {
                        let ModelOp::Cas { e, n, .. } = *op else { unreachable!() };
                        match mem.cas_link(addr(a), val(e), val(n)) {
                            Ok(_) => Some(1),
                            Err(_) => {
                                *h = Helping::Load;
                                None
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Final word values plus every op's result, per thread in program order.
pub type Outcome = ([Val; WORDS], Vec<Vec<Val>>);

#[derive(Clone, PartialEq, Eq, Hash)]
struct Thread {
    pc: usize,
    machine: Option<Machine>,
    results: Vec<Val>,
}

#[derive(Clone, PartialEq, Eq, Hash)]
struct State {
    words: [NodeRef; WORDS],
    status: Vec<u8>,
    threads: Vec<Thread>,
}

/// Sequential semantics.
pub fn apply(words: &mut [Val; WORDS], op: ModelOp) -> Val {
    match op {
        ModelOp::Rdcss { a1, e1, a2, e2, n1 } => {
            let ok = words[a1] == e1 && words[a2] == e2;
            if ok {
                words[a1] = n1;
            }
            ok as Val
        }
        ModelOp::Cas { a, e, n } => {
            let ok = words[a] == e;
            if ok {
                words[a] = n;
            }
            ok as Val
        }
        ModelOp::Read { a } => words[a],
    }
}

/// Every outcome of every program-order-preserving sequential execution.
pub fn sequential_outcomes(init: [Val; WORDS], programs: &[Vec<ModelOp>]) -> BTreeSet<Outcome> {
    fn go(words: [Val; WORDS], programs: &[Vec<ModelOp>], results: &mut Vec<Vec<Val>>, out: &mut BTreeSet<Outcome>) {
        let mut progressed = false;
        for t in 0..programs.len() {
            let pc = results[t].len();
            if pc < programs[t].len() {
                progressed = true;
                let mut w = words;
                let r = apply(&mut w, programs[t][pc]);
                results[t].push(r);
                go(w, programs, results, out);
                results[t].pop();
            }
        }
        if !progressed {
            out.insert((words, results.clone()));
        }
    }
    let mut out = BTreeSet::new();
    go(init, programs, &mut vec![Vec::new(); programs.len()], &mut out);
    out
}

#[derive(Debug, Default)]
pub struct Exploration {
    pub states: usize,
    pub outcomes: BTreeSet<Outcome>,
    /// Terminal states that still held a descriptor word.
    pub dangling_descriptors: usize,
}

/// Visits every interleaving of the threads' atomic steps.
pub fn explore(init: [Val; WORDS], programs: &[Vec<ModelOp>]) -> Exploration {
    // descriptor slot = 1 + flat op index
    let mut fields = vec![DescFields {
        addr1: NodeRef::NULL,
        exp1: NodeRef::NULL,
        addr2: NodeRef::NULL,
        exp2: NodeRef::NULL,
        new1: NodeRef::NULL,
    }];
    let mut base = Vec::new();
    for p in programs {
        base.push(fields.len() as u64);
        for op in p {
            fields.push(match *op {
                ModelOp::Rdcss { a1, e1, a2, e2, n1 } => DescFields {
                    addr1: addr(a1),
                    exp1: val(e1),
                    addr2: addr(a2),
                    exp2: val(e2),
                    new1: val(n1),
                },
                _ => fields[0],
            });
        }
    }
    let start = State {
        words: init.map(val),
        status: vec![UNDECIDED; fields.len()],
        threads: programs.iter().map(|_| Thread { pc: 0, machine: None, results: Vec::new() }).collect(),
    };
    let mut seen = HashSet::new();
    let mut stack = vec![start];
    let mut ex = Exploration::default();
    while let Some(s) = stack.pop() {
        if !seen.insert(s.clone()) {
            continue;
        }
        ex.states += 1;
        let mut terminal = true;
        for t in 0..programs.len() {
            let th = &s.threads[t];
            if th.machine.is_none() && th.pc == programs[t].len() {
                continue;
            }
            terminal = false;
            let mem = Mem {
                words: s.words.map(Cell::new),
                status: s.status.iter().copied().map(Cell::new).collect(),
                fields: &fields,
            };
            let mut next = s.clone();
            let nt = &mut next.threads[t];
            let slot = base[t] + nt.pc as u64;
            let op = programs[t][nt.pc];
            let m = nt.machine.get_or_insert_with(|| Machine::new(op, slot, fields[slot as usize]));
            if let Some(r) = m.step(&mem) {
                nt.machine = None;
                nt.results.push(r);
                nt.pc += 1;
            }
            next.words = mem.words.map(|c| c.get());
            next.status = mem.status.iter().map(Cell::get).collect();
            stack.push(next);
        }
        if terminal {
            if s.words.iter().any(|w| w.is_descriptor()) {
                ex.dangling_descriptors += 1;
            } else {
                ex.outcomes.insert((s.words.map(val_of), s.threads.iter().map(|t| t.results.clone()).collect()));
            }
        }
    }
    ex
}

/// Outcomes the concurrent runs produced that no sequential order explains.
pub fn check(init: [Val; WORDS], programs: &[Vec<ModelOp>]) -> Result<Exploration, String> {
    let ex = explore(init, programs);
    if ex.dangling_descriptors > 0 {
        return Err(format!("{} terminal states kept a descriptor", ex.dangling_descriptors));
    }
    let seq = sequential_outcomes(init, programs);
    if let Some(bad) = ex.outcomes.iter().find(|o| !seq.contains(*o)) {
        return Err(format!("outcome {bad:?} of {programs:?} has no sequential witness"));
    }
    Ok(ex)
}

/// Small op alphabet over initial words `[0, 1, 2]`. RDCSS only targets
/// word 0 and reads words 1 and 2 as control words, which plain CAS may
/// change. A control word must never be an RDCSS target: two RDCSS that
/// control each other's target can both fail (see the test below).
pub fn alphabet() -> Vec<ModelOp> {
    use ModelOp::*;
    vec![
        Rdcss { a1: 0, e1: 0, a2: 1, e2: 1, n1: 2 },
        Rdcss { a1: 0, e1: 1, a2: 1, e2: 2, n1: 0 },
        Cas { a: 1, e: 1, n: 2 },
        Cas { a: 0, e: 0, n: 1 },
        Rdcss { a1: 0, e1: 2, a2: 2, e2: 2, n1: 0 },
        Read { a: 0 },
    ]
}

pub const INIT: [Val; WORDS] = [0, 1, 2];

/// Every program shape up to `threads` x `ops` over `alphabet`.
pub fn programs(alphabet: &[ModelOp], threads: usize, ops: usize) -> impl Iterator<Item = Vec<Vec<ModelOp>>> + '_ {
    let slots = threads * ops;
    let total = alphabet.len().pow(slots as u32);
    (0..total).map(move |mut code| {
        (0..threads)
            .map(|_| {
                (0..ops)
                    .map(|_| {
                        let op = alphabet[code % alphabet.len()];
                        code /= alphabet.len();
                        op
                    })
                    .collect()
            })
            .collect()
    })
}

/// Checks every program of every shape up to 3 threads x 2 ops, using the
/// full alphabet up to 2x2 and its first `wide` ops for three threads.
pub fn check_all(wide: usize) -> Result<usize, String> {
    let full = alphabet();
    let mut states = 0;
    for (threads, ops, alpha) in [
        (1, 1, &full[..]),
        (1, 2, &full[..]),
        (2, 1, &full[..]),
        (2, 2, &full[..]),
        (3, 1, &full[..]),
        (3, 2, &full[..wide.min(full.len())]),
    ] {
        for p in programs(alpha, threads, ops) {
            states += check(INIT, &p)?.states;
        }
    }
    Ok(states)
}
