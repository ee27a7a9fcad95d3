//! Property harnesses: each builds its own cluster, drives it and returns
//! what was observed. Sizes are parameters so the same harness serves quick
//! CLI runs and full acceptance runs.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering::SeqCst};
use std::sync::{Arc, Barrier};
use std::thread;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::history::Recorder;
use super::linearizability::{self, Budget, CheckReport};
use crate::background::SplitOutcome;
use crate::node::Key;
use crate::runtime::{Cluster, Tuning};
use crate::transport::{DeliveryPolicy, OpKind};

/// Tuning for harness clusters: no periodic balancer, small arenas.
pub fn harness_tuning() -> Tuning {
    Tuning { balancer_period_ms: 0, workers: 8, arena_capacity: 1 << 18, move_cooldown_ms: 0, ..Tuning::default() }
}

/// Background operation kinds the forcer can pick.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Forced {
    Split,
    Move,
    Merge,
}

/// Runs one random split, move or merge on a random server's executor.
/// Returns what was attempted and whether it took effect.
pub fn force_background_op(cluster: &Cluster, rng: &mut impl Rng, allowed: &[Forced]) -> Option<(Forced, bool)> {
    let at = rng.random_range(0..cluster.len());
    let server = cluster.server(at);
    let shard = server.shard();
    let mut entries: Vec<_> = shard.owned_entries().into_iter().filter(|e| !shard.is_frozen(e.subhead())).collect();
    entries.sort_by_key(|e| e.key_min());
    let kind = *allowed.choose(rng)?;
    let done = match kind {
        Forced::Split => {
            let e = entries.choose(rng)?.clone();
            server
                .run_maintenance(move |s| {
                    let Some(mid) = s.shard().split_point(&e) else { return false };
                    matches!(s.shard().split(&e, mid), Ok(SplitOutcome::NewEntry(_)))
                })
                .unwrap_or(false)
        }
        Forced::Move => {
            if cluster.len() < 2 {
                return None;
            }
            let e = entries.choose(rng)?.clone();
            let mut dest = rng.random_range(0..cluster.len() - 1);
            if dest >= at {
                dest += 1;
            }
            let dest = cluster.server(dest).id();
            server.run_maintenance(move |s| s.shard().move_sublist(&e, dest).is_ok()).unwrap_or(false)
        }
        Forced::Merge => {
            let pairs: Vec<_> = entries.windows(2).filter(|w| w[0].key_max() == w[1].key_min()).collect();
            let w = pairs.choose(rng)?;
            let (l, r) = (w[0].clone(), w[1].clone());
            server.run_maintenance(move |s| s.shard().merge(&l, &r).is_ok()).unwrap_or(false)
        }
    };
    Some((kind, done))
}

/// Shape of one linearizability trial, derived from its seed.
#[derive(Clone, Debug)]
pub struct LinShape {
    pub servers: usize,
    pub clients: usize,
    pub ops_per_client: usize,
    pub keys: Vec<Key>,
}

impl LinShape {
    pub fn from_seed(seed: u64, max_clients: usize, max_ops: usize) -> LinShape {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let servers = rng.random_range(1..=4);
        let clients = rng.random_range(2..=max_clients.max(2));
        let ops_per_client = rng.random_range(max_ops.div_ceil(2)..=max_ops);
        let hot = rng.random_range(1..=3);
        let mut keys: Vec<Key> = (0..hot).map(|_| rng.random_range(0..KEY_SPACE)).collect();
        keys.sort_unstable();
        keys.dedup();
        LinShape { servers, clients, ops_per_client, keys }
    }
}

const KEY_SPACE: Key = 64;

pub struct LinTrial {
    pub shape: LinShape,
    pub report: CheckReport,
    pub forced: usize,
}

/// One seeded history on a loopback cluster with background operations
/// forced throughout, checked for linearizability. `mutate` disables the
/// delete-side mark check on every server.
pub fn linearizability_trial(seed: u64, max_clients: usize, max_ops: usize, mutate: bool) -> LinTrial {
    let shape = LinShape::from_seed(seed, max_clients, max_ops);
    let cluster =
        Arc::new(Cluster::loopback(shape.servers, (0, KEY_SPACE), harness_tuning(), DeliveryPolicy { seed, ..DeliveryPolicy::default() }).expect("cluster"));
    for s in &cluster.servers {
        s.shard().faults.skip_delete_mark_check.store(mutate, SeqCst);
        s.shard().faults.set_jitter(250);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut initial = BTreeSet::new();
    for &k in &shape.keys {
        if rng.random_bool(0.5) {
            cluster.execute(0, OpKind::Insert, k).expect("preload");
            initial.insert(k);
        }
    }
    // spread filler keys so sublists can split
    for k in (0..KEY_SPACE).step_by(3) {
        if !shape.keys.contains(&k) {
            cluster.execute(0, OpKind::Insert, k).expect("preload");
        }
    }
    let rec = Arc::new(Recorder::new());
    let start = Arc::new(Barrier::new(shape.clients + 1));
    let done = Arc::new(AtomicBool::new(false));
    let clients: Vec<_> = (0..shape.clients)
        .map(|c| {
            let (cluster, rec, start, keys) = (Arc::clone(&cluster), Arc::clone(&rec), Arc::clone(&start), shape.keys.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(c as u64));
            let ops = shape.ops_per_client;
            thread::spawn(move || {
                start.wait();
                for _ in 0..ops {
                    let key = *keys.choose(&mut rng).expect("keys");
                    let kind = [OpKind::Find, OpKind::Insert, OpKind::Remove, OpKind::Remove][rng.random_range(0..4)];
                    let at = rng.random_range(0..cluster.len());
                    let _ = rec.record(c as u32, kind, key, || cluster.execute(at, kind, key).map(|o| o.value));
                }
            })
        })
        .collect();
    let forcer = {
        let (cluster, start, done) = (Arc::clone(&cluster), Arc::clone(&start), Arc::clone(&done));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf0ce);
        thread::spawn(move || {
            start.wait();
            let mut n = 0;
            while !done.load(SeqCst) {
                if force_background_op(&cluster, &mut rng, &[Forced::Split, Forced::Move, Forced::Merge]).is_some() {
                    n += 1;
                }
                thread::yield_now();
            }
            n
        })
    };
    clients.into_iter().for_each(|h| h.join().expect("client"));
    done.store(true, SeqCst);
    let forced = forcer.join().expect("forcer");
    cluster.shutdown();
    let report = linearizability::check(&rec.take(), &initial, Budget::default());
    LinTrial { shape, report, forced }
}

/// One Move under concurrent inserts and removes. Clients are paused at
/// the freeze point; once the move returns, the source's final sequence
/// is compared with the destination copy before clients resume.
pub fn replay_trial(seed: u64) -> Result<ReplayOutcome, String> {
    use super::gate::Gate;
    use super::inspect::{same_structure, structure};
    use crate::shard::ChaosPoint;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy = DeliveryPolicy { seed, ..DeliveryPolicy::default() };
    let cluster = Arc::new(Cluster::loopback(2, (0, 1000), harness_tuning(), policy).map_err(|e| e.to_string())?);
    let src = Arc::clone(cluster.server(0));
    let range = 0..500;
    for _ in 0..rng.random_range(10..80) {
        cluster.execute(0, OpKind::Insert, rng.random_range(range.clone())).map_err(|e| e.to_string())?;
    }
    src.shard().faults.set_jitter(300);
    let gate = Arc::new(Gate::new());
    {
        let (gate, once) = (Arc::clone(&gate), AtomicBool::new(false));
        src.shard().faults.set_hook(Some(Arc::new(move |server, point| {
            if server == 0 && point == ChaosPoint::BeforeFreeze && !once.swap(true, SeqCst) {
                gate.hold();
            }
        })));
    }
    let stop = Arc::new(AtomicBool::new(false));
    let progress = Arc::new(AtomicUsize::new(0));
    let clients: Vec<_> = (0..rng.random_range(1..=3))
        .map(|c| {
            let (cluster, gate, stop) = (Arc::clone(&cluster), Arc::clone(&gate), Arc::clone(&stop));
            let progress = Arc::clone(&progress);
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919).wrapping_add(c));
            let range = range.clone();
            thread::spawn(move || {
                let mut n = 0;
                while !stop.load(SeqCst) {
                    let kind = if rng.random_bool(0.5) { OpKind::Insert } else { OpKind::Remove };
                    let (at, key) = (rng.random_range(0..2), rng.random_range(range.clone()));
                    gate.pass(|| cluster.execute(at, kind, key)).map_err(|e| e.to_string())?;
                    progress.fetch_add(1, SeqCst);
                    n += 1;
                }
                Ok::<usize, String>(n)
            })
        })
        .collect();
    // let churn get going so it overlaps the copy walk
    let warmup = rng.random_range(1..40);
    while progress.load(SeqCst) < warmup {
        thread::yield_now();
    }
    let entry = src.shard().registry.get_by_key(100).ok_or("no entry for the moved range")?;
    let (sh, st) = (entry.subhead(), entry.subtail());
    let dest = cluster.server(1).id();
    let moved = src.run_maintenance(move |s| s.shard().move_sublist(&entry, dest)).ok_or("executor gone")?;
    let verdict = moved.map_err(|e| format!("move failed: {e}")).and_then(|_| {
        let d = cluster.server(1).shard();
        let copy = d.registry.get_by_key(100).ok_or("destination lacks the range")?;
        if !copy.is_owned_by(dest) {
            return Err("destination does not own the moved range".to_string());
        }
        let a = structure(src.shard(), sh, st);
        let b = structure(d, copy.subhead(), copy.subtail());
        same_structure(&a, &b).map(|_| a.iter().filter(|n| !n.3).count())
    });
    let replicated = src.shard().stats.replicates_sent.load(SeqCst);
    gate.resume();
    stop.store(true, SeqCst);
    let mut ops = 0;
    for c in clients {
        ops += c.join().map_err(|_| "client panicked".to_string())??;
    }
    src.shard().faults.set_hook(None);
    cluster.shutdown();
    log::debug!("event=replay_trial seed={seed} client_ops={ops} replicated={replicated}");
    verdict.map(|live| ReplayOutcome { live, client_ops: ops, replicated })
}

#[derive(Clone, Copy, Debug)]
pub struct ReplayOutcome {
    /// Live nodes in the moved sublist at the freeze.
    pub live: usize,
    pub client_ops: usize,
    /// Updates that raced with the copy and were replicated to the copy.
    pub replicated: u64,
}

/// Runs `clients` threads of random client ops entering at random servers
/// until `stop` is set. Each op goes through `gate`. Returns per-thread op
/// counts, or the first client error.
fn churn(
    cluster: &Arc<Cluster>,
    gate: &Arc<super::gate::Gate>,
    stop: &Arc<AtomicBool>,
    clients: usize,
    keys: Key,
    seed: u64,
) -> Vec<thread::JoinHandle<Result<u64, String>>> {
    (0..clients)
        .map(|c| {
            let (cluster, gate, stop) = (Arc::clone(cluster), Arc::clone(gate), Arc::clone(stop));
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37).wrapping_add(c as u64));
            thread::spawn(move || {
                let mut n = 0;
                while !stop.load(SeqCst) {
                    let kind = [OpKind::Find, OpKind::Insert, OpKind::Remove][rng.random_range(0..3)];
                    let (at, key) = (rng.random_range(0..cluster.len()), rng.random_range(0..keys));
                    gate.pass(|| cluster.execute(at, kind, key)).map_err(|e| format!("client {c}: {e}"))?;
                    n += 1;
                }
                Ok(n)
            })
        })
        .collect()
}

fn join_all(hs: Vec<thread::JoinHandle<Result<u64, String>>>) -> Result<u64, String> {
    let mut total = 0;
    for h in hs {
        total += h.join().map_err(|_| "client thread panicked".to_string())??;
    }
    Ok(total)
}

/// Hop-count distribution of `ops` routed client ops on 4 servers, with
/// or without Moves running alongside.
pub fn hop_run(ops: u64, with_moves: bool, seed: u64) -> Result<(super::monitors::Counters, u64), String> {
    use super::monitors::Counters;
    let keys: Key = 4096;
    let cluster = Arc::new(Cluster::loopback(4, (0, keys), harness_tuning(), DeliveryPolicy { seed, ..DeliveryPolicy::default() }).map_err(|e| e.to_string())?);
    for k in (0..keys).step_by(2) {
        cluster.execute(0, OpKind::Insert, k).map_err(|e| e.to_string())?;
    }
    let before = Counters::collect(&cluster);
    let done = Arc::new(AtomicBool::new(false));
    let mover = with_moves.then(|| {
        let (cluster, done) = (Arc::clone(&cluster), Arc::clone(&done));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x40e5);
        thread::spawn(move || {
            let mut moves = 0;
            while !done.load(SeqCst) {
                if let Some((_, true)) = force_background_op(&cluster, &mut rng, &[Forced::Move, Forced::Move, Forced::Split]) {
                    moves += 1;
                }
            }
            moves
        })
    });
    let clients = 4;
    let hs: Vec<_> = (0..clients)
        .map(|c| {
            let cluster = Arc::clone(&cluster);
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(c));
            thread::spawn(move || {
                for _ in 0..ops / clients {
                    let kind = [OpKind::Find, OpKind::Find, OpKind::Insert, OpKind::Remove][rng.random_range(0..4)];
                    cluster.execute(rng.random_range(0..4), kind, rng.random_range(0..keys)).map_err(|e| e.to_string())?;
                }
                Ok(ops / clients)
            })
        })
        .collect();
    let r = join_all(hs);
    done.store(true, SeqCst);
    let background = mover.map_or(0, |m| m.join().unwrap_or(0));
    let counters = Counters::collect(&cluster).since(&before);
    cluster.shutdown();
    r.map(|_| (counters, background))
}

/// Waits (bounded) for every owned sublist on `shard` to be quiescent and
/// returns (observed, recorded) offset sums.
fn settle_offsets(shard: &crate::shard::Shard) -> Result<(i64, i64), String> {
    let deadline = std::time::Instant::now() + std::time::Duration::from_secs(10);
    loop {
        if let Some(s) = super::inspect::quiescent_offset_sum(shard) {
            return Ok(s);
        }
        if std::time::Instant::now() > deadline {
            return Err("no quiescence within 10 s".into());
        }
        thread::yield_now();
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct OffsetOutcome {
    pub splits: u32,
    pub merges: u32,
    pub client_ops: u64,
}

/// `count` random splits and merges on one server under client churn.
/// After each, clients are paused and the quiescent offset sum must equal
/// the sum before the operation.
pub fn offset_run(count: u32, seed: u64) -> Result<OffsetOutcome, String> {
    use super::gate::Gate;
    let keys = 2000;
    let cluster = Arc::new(Cluster::loopback(1, (0, keys), harness_tuning(), DeliveryPolicy::default()).map_err(|e| e.to_string())?);
    for k in (0..keys).step_by(3) {
        cluster.execute(0, OpKind::Insert, k).map_err(|e| e.to_string())?;
    }
    let (gate, stop) = (Arc::new(Gate::new()), Arc::new(AtomicBool::new(false)));
    let clients = churn(&cluster, &gate, &stop, 3, keys, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shard = Arc::clone(cluster.server(0).shard());
    let mut out = OffsetOutcome::default();
    let mut result = Ok(());
    for i in 0..count {
        let before = {
            let _p = gate.pause();
            settle_offsets(&shard)
        };
        let before = match before {
            Ok(b) => b,
            Err(e) => {
                result = Err(e);
                break;
            }
        };
        let allowed: &[Forced] = if rng.random_bool(0.5) { &[Forced::Split] } else { &[Forced::Merge] };
        match force_background_op(&cluster, &mut rng, allowed) {
            Some((Forced::Split, true)) => out.splits += 1,
            Some((Forced::Merge, true)) => out.merges += 1,
            _ => {}
        }
        let _p = gate.pause();
        match settle_offsets(&shard) {
            Ok(after) if after.0 == before.0 && after.0 == after.1 => {}
            Ok(after) => {
                result = Err(format!("operation {i}: offset sum {before:?} became {after:?}"));
                break;
            }
            Err(e) => {
                result = Err(e);
                break;
            }
        }
    }
    stop.store(true, SeqCst);
    let ops = join_all(clients);
    cluster.shutdown();
    result?;
    out.client_ops = ops?;
    Ok(out)
}

/// Unfrozen, owned ranges across the cluster; any overlap means two live
/// subheads for one key.
pub fn overlapping_active_ranges(cluster: &Cluster) -> Option<String> {
    let mut all: Vec<_> = cluster.servers.iter().flat_map(|s| super::inspect::active_ranges(s.shard())).collect();
    all.sort_by_key(|r| (r.1, r.2));
    all.windows(2).find(|w| w[1].1 < w[0].2).map(|w| format!("active ranges {:?} and {:?} overlap", w[0], w[1]))
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SubheadOutcome {
    pub samples: u64,
    pub background_ops: u64,
    pub client_ops: u64,
}

/// Mixed client and forced background traffic on 4 servers for
/// `duration`; every `every`, clients and background work are paused and
/// the cluster is checked for overlapping live sublists and sign
/// violations.
pub fn subhead_run(duration: std::time::Duration, every: std::time::Duration, seed: u64) -> Result<SubheadOutcome, String> {
    use super::gate::Gate;
    use parking_lot::Mutex;
    use std::time::Instant;
    let keys = 8000;
    let cluster = Arc::new(Cluster::loopback(4, (0, keys), harness_tuning(), DeliveryPolicy { seed, ..DeliveryPolicy::default() }).map_err(|e| e.to_string())?);
    for k in (0..keys).step_by(4) {
        cluster.execute(0, OpKind::Insert, k).map_err(|e| e.to_string())?;
    }
    let (gate, stop) = (Arc::new(Gate::new()), Arc::new(AtomicBool::new(false)));
    let clients = churn(&cluster, &gate, &stop, 4, keys, seed);
    let bg_lock = Arc::new(Mutex::new(()));
    let forcer = {
        let (cluster, stop, bg_lock) = (Arc::clone(&cluster), Arc::clone(&stop), Arc::clone(&bg_lock));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbac6);
        thread::spawn(move || {
            let mut n = 0;
            while !stop.load(SeqCst) {
                let _g = bg_lock.lock();
                if let Some((_, true)) = force_background_op(&cluster, &mut rng, &[Forced::Split, Forced::Move, Forced::Merge]) {
                    n += 1;
                }
                drop(_g);
                thread::yield_now();
            }
            n
        })
    };
    let mut out = SubheadOutcome::default();
    let mut failure = None;
    let end = Instant::now() + duration;
    while Instant::now() < end && failure.is_none() {
        thread::sleep(every.min(end.saturating_duration_since(Instant::now())));
        let _g = bg_lock.lock();
        let _p = gate.pause();
        cluster.wait_idle(std::time::Duration::from_secs(10));
        out.samples += 1;
        failure = overlapping_active_ranges(&cluster).or_else(|| {
            let c = super::monitors::Counters::collect(&cluster);
            (c.sign_violations > 0).then(|| format!("{} sign violations", c.sign_violations))
        });
    }
    stop.store(true, SeqCst);
    out.background_ops = forcer.join().unwrap_or(0);
    let ops = join_all(clients);
    cluster.shutdown();
    if let Some(f) = failure {
        return Err(format!("sample {}: {f}", out.samples));
    }
    out.client_ops = ops?;
    Ok(out)
}

thread_local! {
    static VICTIM: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ProgressOutcome {
    /// Ops/s per client thread with every client running.
    pub baseline_per_thread: f64,
    /// Ops/s per other client while one client is stuck mid-update.
    pub suspended_per_thread: f64,
    pub maintenance_waits: u64,
    pub balancer_actions: u64,
}

/// One client is frozen right after it bumped a start counter (the point
/// where a stalled updater hurts most), while the others keep going and
/// the periodic balancer runs.
pub fn progress_run(clients: usize, baseline: std::time::Duration, window: std::time::Duration, seed: u64) -> Result<ProgressOutcome, String> {
    use crate::shard::ChaosPoint;
    use parking_lot::{Condvar, Mutex};
    use std::sync::atomic::AtomicU64;
    use std::time::Instant;

    let keys: Key = 4000;
    // the stalled client pins its epoch, so nothing is reclaimed until it
    // resumes; the arena must hold every node allocated in the window
    let tuning = Tuning { balancer_period_ms: 10, split_threshold: 64, arena_capacity: 1 << 22, ..harness_tuning() };
    let cluster = Arc::new(Cluster::loopback(2, (0, keys + 100), tuning, DeliveryPolicy { seed, ..DeliveryPolicy::default() }).map_err(|e| e.to_string())?);
    for k in (0..keys).step_by(2) {
        cluster.execute(0, OpKind::Insert, k).map_err(|e| e.to_string())?;
    }
    let release = Arc::new((Mutex::new(false), Condvar::new()));
    let blocked = Arc::new(AtomicBool::new(false));
    for s in &cluster.servers {
        let (release, blocked) = (Arc::clone(&release), Arc::clone(&blocked));
        s.shard().faults.set_hook(Some(Arc::new(move |_, point| {
            if point == ChaosPoint::AfterStartCount && VICTIM.with(|v| v.get()) && !blocked.swap(true, SeqCst) {
                let mut go = release.0.lock();
                while !*go {
                    release.1.wait(&mut go);
                }
            }
        })));
    }
    cluster.start_balancers();
    let before = super::monitors::Counters::collect(&cluster);
    let counts: Arc<Vec<AtomicU64>> = Arc::new((0..clients).map(|_| AtomicU64::new(0)).collect());
    let stop = Arc::new(AtomicBool::new(false));
    let hs: Vec<_> = (0..clients)
        .map(|c| {
            let (cluster, counts, stop) = (Arc::clone(&cluster), Arc::clone(&counts), Arc::clone(&stop));
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(c as u64));
            thread::spawn(move || {
                while !stop.load(SeqCst) {
                    let kind = [OpKind::Find, OpKind::Insert, OpKind::Remove][rng.random_range(0..3)];
                    cluster.execute(rng.random_range(0..2), kind, rng.random_range(0..keys)).map_err(|e| e.to_string())?;
                    counts[c].fetch_add(1, SeqCst);
                }
                Ok(0)
            })
        })
        .collect();
    let total = |counts: &[AtomicU64]| counts.iter().map(|c| c.load(SeqCst)).sum::<u64>();
    let t0 = (Instant::now(), total(&counts));
    thread::sleep(baseline);
    let baseline_per_thread = (total(&counts) - t0.1) as f64 / t0.0.elapsed().as_secs_f64() / clients as f64;

    let victim = {
        let cluster = Arc::clone(&cluster);
        thread::spawn(move || {
            VICTIM.with(|v| v.set(true));
            cluster.execute(0, OpKind::Insert, keys + 7).map(|o| o.value)
        })
    };
    while !blocked.load(SeqCst) {
        thread::yield_now();
    }
    let t1 = (Instant::now(), total(&counts));
    thread::sleep(window);
    let suspended_per_thread = (total(&counts) - t1.1) as f64 / t1.0.elapsed().as_secs_f64() / clients as f64;
    *release.0.lock() = true;
    release.1.notify_all();
    stop.store(true, SeqCst);
    let victim_ok = victim.join().map_err(|_| "victim panicked".to_string())?;
    let clients_ok = join_all(hs);
    cluster.stop_balancers();
    let c = super::monitors::Counters::collect(&cluster).since(&before);
    cluster.servers.iter().for_each(|s| s.shard().faults.set_hook(None));
    cluster.shutdown();
    clients_ok?;
    if victim_ok != Ok(true) {
        return Err(format!("suspended insert finished with {victim_ok:?}"));
    }
    Ok(ProgressOutcome {
        baseline_per_thread,
        suspended_per_thread,
        maintenance_waits: c.maintenance_waits,
        balancer_actions: c.splits + c.moves,
    })
}

/// Zipfian workload on `servers` worker-constrained loopback servers.
pub fn scaling_run(servers: usize, workers: usize, spec: &super::workload::WorkloadSpec) -> Result<super::workload::WorkloadReport, String> {
    let tuning = Tuning { workers, balancer_period_ms: 50, arena_capacity: 1 << 21, ..Tuning::default() };
    let cluster = Arc::new(Cluster::loopback(servers, spec.key_range(), tuning, DeliveryPolicy::default()).map_err(|e| e.to_string())?);
    cluster.start_balancers();
    let r = super::workload::run_workload(spec, &cluster, None);
    cluster.shutdown();
    Ok(r)
}

/// `cycles` splits at random nodes, each immediately merged back, while
/// readers run. The client key set must be unchanged after every cycle.
pub fn split_merge_inverse(cycles: u32, seed: u64) -> Result<u32, String> {
    use super::inspect::{client_nodes, owned_keys};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cluster = Arc::new(Cluster::loopback(1, (0, 5000), harness_tuning(), DeliveryPolicy::default()).map_err(|e| e.to_string())?);
    let mut expected: Vec<Key> = (0..600).map(|_| rng.random_range(0..5000)).collect();
    expected.sort_unstable();
    expected.dedup();
    for &k in &expected {
        cluster.execute(0, OpKind::Insert, k).map_err(|e| e.to_string())?;
    }
    let stop = Arc::new(AtomicBool::new(false));
    let readers: Vec<_> = (0..2)
        .map(|c| {
            let (cluster, stop, expected) = (Arc::clone(&cluster), Arc::clone(&stop), expected.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ c);
            thread::spawn(move || {
                let mut n = 0;
                while !stop.load(SeqCst) {
                    let k = *expected.choose(&mut rng).expect("keys");
                    if !cluster.execute(0, OpKind::Find, k).map_err(|e| e.to_string())?.value {
                        return Err(format!("reader lost {k}"));
                    }
                    n += 1;
                }
                Ok(n)
            })
        })
        .collect();
    let server = Arc::clone(cluster.server(0));
    let mut completed = 0;
    let mut result = Ok(());
    for i in 0..cycles {
        let entries = server.shard().owned_entries();
        let e = entries.choose(&mut rng).expect("an entry").clone();
        let nodes = client_nodes(server.shard(), &e);
        let Some(&at) = nodes.choose(&mut rng) else { continue };
        let merged = server
            .run_maintenance(move |s| -> Result<bool, String> {
                match s.shard().split(&e, at).map_err(|x| x.to_string())? {
                    SplitOutcome::NewEntry(r) => s.shard().merge(&e, &r).map(|_| true).map_err(|x| x.to_string()),
                    SplitOutcome::Failed => Ok(false),
                }
            })
            .ok_or("executor gone")?;
        match merged {
            Ok(true) => completed += 1,
            Ok(false) => {}
            Err(x) => {
                result = Err(format!("cycle {i}: {x}"));
                break;
            }
        }
        let now = owned_keys(server.shard());
        if now != expected {
            let lost: Vec<_> = expected.iter().filter(|k| now.binary_search(k).is_err()).collect();
            let extra: Vec<_> = now.iter().filter(|k| expected.binary_search(k).is_err()).collect();
            result = Err(format!("cycle {i}: lost {lost:?}, gained {extra:?}"));
            break;
        }
        if let Err(x) = server.shard().registry.snapshot().check_total() {
            result = Err(format!("cycle {i}: {x}"));
            break;
        }
    }
    stop.store(true, SeqCst);
    let reads = join_all(readers);
    cluster.shutdown();
    result?;
    reads?;
    Ok(completed)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ConvergenceOutcome {
    pub load_splits: u64,
    pub load_moves: u64,
    pub settle_ticks: u32,
    /// Splits performed by the ticks after convergence.
    pub splits_after: u32,
    pub max_size: i64,
    pub total_size: i64,
}

/// Insert-only load of `keys` keys that all start on server 0 of 2, with
/// the periodic balancer on. Then ticks until the balancer stops acting,
/// then `extra_ticks` more, counting their splits.
pub fn convergence_run(keys: u64, threshold: i64, extra_ticks: u32, seed: u64) -> Result<ConvergenceOutcome, String> {
    let tuning = Tuning { split_threshold: threshold, balancer_period_ms: 5, arena_capacity: 1 << 20, ..harness_tuning() };
    let spec = super::workload::WorkloadSpec { keys, seed, ..Default::default() };
    let cluster = Arc::new(Cluster::loopback(2, (0, 2 * keys as Key), tuning, DeliveryPolicy::default()).map_err(|e| e.to_string())?);
    cluster.start_balancers();
    let perm = Arc::new(spec.permutation());
    let hs: Vec<_> = (0..4)
        .map(|c| {
            let (cluster, perm) = (Arc::clone(&cluster), Arc::clone(&perm));
            thread::spawn(move || {
                for &k in perm.iter().skip(c).step_by(4) {
                    if !cluster.execute(c % 2, OpKind::Insert, k).map_err(|e| e.to_string())?.value {
                        return Err(format!("insert of fresh key {k} returned false"));
                    }
                }
                Ok(0)
            })
        })
        .collect();
    let loaded = join_all(hs);
    cluster.stop_balancers();
    let c = super::monitors::Counters::collect(&cluster);
    let mut out = ConvergenceOutcome { load_splits: c.splits, load_moves: c.moves, ..Default::default() };
    while cluster.tick_all().acted() {
        out.settle_ticks += 1;
        if out.settle_ticks > 10_000 {
            break;
        }
    }
    for _ in 0..extra_ticks {
        out.splits_after += cluster.tick_all().splits;
    }
    for s in &cluster.servers {
        let sh = s.shard();
        for e in sh.owned_entries() {
            let n = sh.arena.pair(e.pair()).size.load(SeqCst);
            out.max_size = out.max_size.max(n);
            out.total_size += n;
        }
    }
    cluster.shutdown();
    loaded?;
    Ok(out)
}

/// Random registries (with gaps) probed by `lookups` keys; returns the
/// number of disagreements with a linear scan.
pub fn registry_oracle(lookups: u64, seed: u64) -> u64 {
    use crate::node::NodeRef;
    use crate::registry::{Entry, Registry};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    let mut done = 0;
    while done < lookups {
        let reg = Registry::default();
        let mut cuts: Vec<Key> = (0..rng.random_range(1..300)).map(|_| rng.random_range(-5000..5000)).collect();
        cuts.sort_unstable();
        cuts.dedup();
        if rng.random_bool(0.5) {
            cuts.insert(0, crate::node::SH_KEY);
            cuts.push(crate::node::ST_KEY);
        }
        for (i, w) in cuts.windows(2).enumerate() {
            // leave some holes
            if rng.random_bool(0.85) {
                reg.add_entry(Entry::routing(NodeRef::pack(0, i as u64 + 1, false), w[0], w[1])).expect("add");
            }
        }
        let snap = reg.snapshot();
        for _ in 0..100 {
            let key = if rng.random_bool(0.3) && !cuts.is_empty() {
                cuts[rng.random_range(0..cuts.len())].saturating_add(rng.random_range(-1..=1))
            } else {
                rng.random_range(-6000..6000)
            };
            let fast = snap.get_by_key(key).map(|e| e.key_min());
            let slow = snap.entries().iter().find(|e| e.covers(key)).map(|e| e.key_min());
            mismatches += (fast != slow) as u64;
            done += 1;
        }
    }
    mismatches
}
