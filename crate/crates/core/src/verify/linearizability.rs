//! Per-key linearizability check of set histories (Wing-Gong search with
//! Lowe's memoization).
//!
//! Set operations on different keys commute, so a history is linearizable
//! iff every per-key sub-history is. Each key is a boolean register with
//! find / insert / remove semantics.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use super::history::HistoryEvent;
use crate::node::Key;
use crate::transport::OpKind;

/// Search limits. A key that exceeds either is reported as unchecked.
#[derive(Clone, Copy, Debug)]
pub struct Budget {
    pub max_ops_per_key: usize,
    pub max_steps_per_key: u64,
}

impl Default for Budget {
    fn default() -> Self {
        Budget { max_ops_per_key: 20_000, max_steps_per_key: 2_000_000 }
    }
}

#[derive(Clone, Debug)]
pub struct Violation {
    pub key: Key,
    /// A smallest sub-history of this key that is still not linearizable.
    pub window: Vec<HistoryEvent>,
    pub initially_present: bool,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "key {} (initially {}):", self.key, if self.initially_present { "present" } else { "absent" })?;
        for e in &self.window {
            let resp = if e.response == u64::MAX { "-".to_string() } else { e.response.to_string() };
            writeln!(f, "  client {} {:?} [{}, {}] -> {:?}", e.client, e.kind, e.invoke, resp, e.result)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct CheckReport {
    pub keys: usize,
    pub ops: usize,
    pub unchecked: Vec<Key>,
    pub violation: Option<Violation>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Linearizable,
    Unchecked,
    Violation,
}

impl CheckReport {
    pub fn verdict(&self) -> Verdict {
        match (&self.violation, self.unchecked.is_empty()) {
            (Some(_), _) => Verdict::Violation,
            (None, false) => Verdict::Unchecked,
            (None, true) => Verdict::Linearizable,
        }
    }
}

/// Result of applying `kind` to a register holding `present`, as
/// (returned value, new state).
pub fn step(kind: OpKind, present: bool) -> (bool, bool) {
    match kind {
        OpKind::Find => (present, present),
        OpKind::Insert => (!present, true),
        OpKind::Remove => (present, false),
    }
}

#[derive(Debug, PartialEq, Eq)]
enum KeyResult {
    Ok,
    Bad,
    OverBudget,
}

/// Searches for a linearization of one key's operations.
fn check_key(ops: &[HistoryEvent], present: bool, max_steps: u64) -> KeyResult {
    let n = ops.len();
    let words = n.div_ceil(64);
    let required = ops.iter().filter(|e| e.is_complete()).count();
    let mut done = vec![0u64; words];
    let mut cache: HashSet<(Vec<u64>, bool)> = HashSet::new();
    // frames: (state before, op taken, number of completed ops linearized)
    let mut stack: Vec<(bool, usize)> = Vec::new();
    let mut state = present;
    let mut linearized_complete = 0usize;
    let mut resume_from = 0usize;
    let mut steps = 0u64;
    let is_done = |d: &[u64], i: usize| d[i / 64] >> (i % 64) & 1 == 1;
    loop {
        if linearized_complete == required {
            return KeyResult::Ok;
        }
        steps += 1;
        if steps > max_steps {
            return KeyResult::OverBudget;
        }
        // only ops invoked before every pending response may go next
        let horizon = (0..n).filter(|&i| !is_done(&done, i)).map(|i| ops[i].response).min().unwrap_or(u64::MAX);
        let mut advanced = false;
        let start = std::mem::take(&mut resume_from);
        for i in start..n {
            if ops[i].invoke > horizon {
                break;
            }
            if is_done(&done, i) {
                continue;
            }
            let (ret, next) = step(ops[i].kind, state);
            if ops[i].result.is_some_and(|r| r != ret) {
                continue;
            }
            done[i / 64] |= 1 << (i % 64);
            if cache.insert((done.clone(), next)) {
                stack.push((state, i));
                state = next;
                linearized_complete += ops[i].is_complete() as usize;
                advanced = true;
                break;
            }
            done[i / 64] &= !(1 << (i % 64));
        }
        if !advanced {
            let Some((prev, i)) = stack.pop() else { return KeyResult::Bad };
            done[i / 64] &= !(1 << (i % 64));
            linearized_complete -= ops[i].is_complete() as usize;
            state = prev;
            resume_from = i + 1;
        }
    }
}

/// Greedy shrink: drop events one by one while the rest still fails.
fn shrink(mut ops: Vec<HistoryEvent>, present: bool, max_steps: u64) -> Vec<HistoryEvent> {
    if ops.len() > 400 {
        return ops;
    }
    let mut i = 0;
    while i < ops.len() {
        let mut trial = ops.clone();
        trial.remove(i);
        if check_key(&trial, present, max_steps) == KeyResult::Bad {
            ops = trial;
        } else {
            i += 1;
        }
    }
    ops
}

/// Checks `history`, given the keys present before it began.
pub fn check(history: &[HistoryEvent], initial: &BTreeSet<Key>, budget: Budget) -> CheckReport {
    let mut by_key: BTreeMap<Key, Vec<HistoryEvent>> = BTreeMap::new();
    for e in history {
        by_key.entry(e.key).or_default().push(*e);
    }
    let mut report = CheckReport { keys: by_key.len(), ops: history.len(), ..CheckReport::default() };
    for (key, mut ops) in by_key {
        if ops.len() > budget.max_ops_per_key {
            report.unchecked.push(key);
            continue;
        }
        ops.sort_by_key(|e| e.invoke);
        let present = initial.contains(&key);
        match check_key(&ops, present, budget.max_steps_per_key) {
            KeyResult::Ok => {}
            KeyResult::OverBudget => report.unchecked.push(key),
            KeyResult::Bad => {
                if report.violation.is_none() {
                    let window = shrink(ops, present, budget.max_steps_per_key);
                    report.violation = Some(Violation { key, window, initially_present: present });
                }
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(client: u32, kind: OpKind, invoke: u64, response: u64, result: bool) -> HistoryEvent {
        HistoryEvent { client, kind, key: 7, invoke, response, result: Some(result) }
    }

    fn verdict(h: &[HistoryEvent], present: bool) -> Verdict {
        let init = if present { BTreeSet::from([7]) } else { BTreeSet::new() };
        check(h, &init, Budget::default()).verdict()
    }

    #[test]
    fn sequential_history_passes() {
        use OpKind::*;
        let h = [ev(0, Insert, 0, 1, true), ev(0, Find, 2, 3, true), ev(0, Remove, 4, 5, true), ev(0, Find, 6, 7, false)];
        assert_eq!(verdict(&h, false), Verdict::Linearizable);
    }

    #[test]
    fn overlapping_ops_may_reorder() {
        use OpKind::*;
        // the find overlaps the insert and may come first
        let h = [ev(0, Insert, 0, 3, true), ev(1, Find, 1, 2, false)];
        assert_eq!(verdict(&h, false), Verdict::Linearizable);
    }

    #[test]
    fn stale_read_after_completed_insert_is_caught() {
        use OpKind::*;
        let h = [
            ev(0, Find, 0, 1, false),
            ev(1, Insert, 2, 3, true),
            ev(2, Find, 4, 9, true),
            ev(0, Find, 5, 6, false),
        ];
        let r = check(&h, &BTreeSet::new(), Budget::default());
        assert_eq!(r.verdict(), Verdict::Violation);
        let w = r.violation.unwrap().window;
        assert_eq!(verdict(&w, false), Verdict::Violation);
        for i in 0..w.len() {
            let mut less = w.clone();
            less.remove(i);
            assert_eq!(verdict(&less, false), Verdict::Linearizable, "window not minimal: {w:?}");
        }
    }

    #[test]
    fn double_successful_insert_is_caught() {
        use OpKind::*;
        let h = [ev(0, Insert, 0, 5, true), ev(1, Insert, 1, 6, true)];
        assert_eq!(verdict(&h, false), Verdict::Violation);
        assert_eq!(verdict(&h[..1], true), Verdict::Violation);
    }

    #[test]
    fn unknown_outcomes_may_take_effect_or_not() {
        use OpKind::*;
        let lost = HistoryEvent { client: 1, kind: Insert, key: 7, invoke: 0, response: u64::MAX, result: None };
        assert_eq!(verdict(&[lost, ev(0, Find, 5, 6, true)], false), Verdict::Linearizable);
        assert_eq!(verdict(&[lost, ev(0, Find, 5, 6, false)], false), Verdict::Linearizable);
        // but it cannot take effect before it was invoked
        let late = HistoryEvent { invoke: 10, ..lost };
        assert_eq!(verdict(&[ev(0, Find, 5, 6, true), late], false), Verdict::Violation);
    }

    #[test]
    fn budget_overflow_is_unchecked_not_passed() {
        use OpKind::*;
        let h: Vec<_> = (0..50).map(|c| ev(c, Find, 0, 100, false)).collect();
        let r = check(&h, &BTreeSet::new(), Budget { max_ops_per_key: 10, ..Budget::default() });
        assert_eq!(r.verdict(), Verdict::Unchecked);
    }

    /// Runs a random schedule against a sequential set and emits a history
    /// in which each op's effect instant lies inside its window.
    fn linearizable_history(seed: Vec<(u8, u8, u8)>) -> Vec<HistoryEvent> {
        let mut present = false;
        let mut out = Vec::new();
        for (t, (c, k, widen)) in seed.into_iter().enumerate() {
            let kind = [OpKind::Find, OpKind::Insert, OpKind::Remove][k as usize % 3];
            let (r, n) = step(kind, present);
            present = n;
            // invocation pulled back, response pushed out
            let at = t as u64 * 10 + 5;
            let invoke = at.saturating_sub(widen as u64 % 25);
            let response = at + (widen as u64 / 10) % 25 + 1;
            out.push(HistoryEvent { client: c as u32 % 4, kind, key: 7, invoke, response, result: Some(r) });
        }
        out
    }

    proptest! {
        #[test]
        fn generated_linearizable_histories_pass(seed in prop::collection::vec(any::<(u8, u8, u8)>(), 0..60)) {
            let h = linearizable_history(seed);
            prop_assert_eq!(verdict(&h, false), Verdict::Linearizable);
        }

        #[test]
        fn flipping_a_sequential_result_fails(seed in prop::collection::vec(any::<(u8, u8)>(), 1..40), pick in any::<usize>()) {
            // strictly sequential: every op's result is forced
            let mut h = linearizable_history(seed.into_iter().map(|(c, k)| (c, k, 0)).collect());
            let i = pick % h.len();
            h[i].result = h[i].result.map(|r| !r);
            prop_assert_eq!(verdict(&h, false), Verdict::Violation);
        }
    }
}
