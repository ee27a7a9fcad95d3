//! End-to-end acceptance checks. Each test prints one PASS/FAIL line
//! straight to stdout (visible without --nocapture) and then asserts.
//! Tests share one lock so timing-sensitive runs do not overlap.

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use dili_core::runtime::MAX_HOPS;
use dili_core::verify::linearizability::Verdict;
use dili_core::verify::rdcss_model;
use dili_core::verify::suite::*;
use dili_core::verify::workload::WorkloadSpec;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|p| p.into_inner())
}

fn report(n: u32, name: &str, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "acceptance {n:>2} {name:<28} {verdict}  {detail}");
}

#[test]
fn c01_linearizability_and_mutation_kill_rate() {
    let _s = serial();
    let started = Instant::now();
    let seeds = 1000u64;
    let (mut ok, mut killed, mut unchecked, mut forced) = (0, 0, 0, 0);
    let mut first_bad = None;
    for seed in 0..seeds {
        let t = linearizability_trial(seed, 8, 50, false);
        forced += t.forced;
        match t.report.verdict() {
            Verdict::Linearizable => ok += 1,
            Verdict::Unchecked => unchecked += 1,
            Verdict::Violation => {
                first_bad.get_or_insert((seed, t.report.violation.map(|v| v.to_string())));
            }
        }
        if linearizability_trial(seed, 8, 50, true).report.verdict() == Verdict::Violation {
            killed += 1;
        }
    }
    let elapsed = started.elapsed();
    let kill_rate = killed as f64 / seeds as f64;
    let pass = ok == seeds && kill_rate >= 0.95 && elapsed <= Duration::from_secs(600);
    report(
        1,
        "linearizability",
        pass,
        format!(
            "{ok}/{seeds} linearizable ({unchecked} unchecked), mutation caught {killed}/{seeds} ({:.1}%), {forced} forced background ops, {:.0} s",
            kill_rate * 100.0,
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass, "first violation: {first_bad:?}");
}

#[test]
fn c02_moved_copy_matches_source() {
    let _s = serial();
    let started = Instant::now();
    let runs = 500u64;
    let (mut ok, mut raced, mut replicated) = (0, 0, 0);
    let mut failures = Vec::new();
    for seed in 0..runs {
        match replay_trial(seed) {
            Ok(o) => {
                ok += 1;
                raced += (o.replicated > 0) as u32;
                replicated += o.replicated;
            }
            Err(e) => failures.push((seed, e)),
        }
    }
    let elapsed = started.elapsed();
    let pass = ok == runs && elapsed <= Duration::from_secs(300);
    report(
        2,
        "replay reconstruction",
        pass,
        format!("{ok}/{runs} identical, {raced} runs raced the copy ({replicated} replicated updates), {:.0} s", elapsed.as_secs_f64()),
    );
    assert!(pass, "{:?}", &failures[..failures.len().min(5)]);
}

#[test]
fn c03_delegation_bound() {
    let _s = serial();
    let (quiet, _) = hop_run(100_000, false, 11).expect("run without moves");
    let (busy, moves) = hop_run(100_000, true, 12).expect("run with moves");
    let pass = quiet.max_hops() <= 2
        && busy.max_hops() <= MAX_HOPS
        && quiet.hop_breaches + busy.hop_breaches == 0
        && moves > 0;
    report(
        3,
        "delegation bound",
        pass,
        format!(
            "balancer off: hist {:?} max {}; with {moves} moves: hist {:?} max {}",
            &quiet.hops[..4],
            quiet.max_hops(),
            &busy.hops[..4],
            busy.max_hops()
        ),
    );
    assert!(pass);
}

#[test]
fn c04_offset_conservation() {
    let _s = serial();
    let r = offset_run(200, 21);
    let pass = r.as_ref().is_ok_and(|o| o.splits > 0 && o.merges > 0);
    report(4, "offset conservation", pass, format!("{r:?}"));
    assert!(pass);
}

#[test]
fn c05_single_active_subhead() {
    let _s = serial();
    let r = subhead_run(Duration::from_secs(60), Duration::from_millis(100), 31);
    let pass = r.as_ref().is_ok_and(|o| o.samples >= 100 && o.background_ops > 0);
    report(5, "single active subhead", pass, format!("{r:?}"));
    assert!(pass);
}

#[test]
fn c06_progress_with_a_stalled_client() {
    let _s = serial();
    let r = progress_run(4, Duration::from_secs(3), Duration::from_secs(10), 41);
    let pass = r.as_ref().is_ok_and(|o| {
        o.suspended_per_thread > 0.0 && o.suspended_per_thread * 2.0 >= o.baseline_per_thread && o.maintenance_waits == 0
    });
    let detail = match &r {
        Ok(o) => format!(
            "baseline {:.0} ops/s/thread, stalled window {:.0} ops/s/thread ({:.2}x), {} client waits on maintenance, {} balancer actions",
            o.baseline_per_thread,
            o.suspended_per_thread,
            o.suspended_per_thread / o.baseline_per_thread,
            o.maintenance_waits,
            o.balancer_actions
        ),
        Err(e) => e.clone(),
    };
    report(6, "lock-freedom proxy", pass, detail);
    assert!(pass);
}

#[test]
fn c07_scaling_four_servers_over_one() {
    let _s = serial();
    let spec = WorkloadSpec { keys: 100_000, ops: 400_000, read_fraction: 0.5, clients: 8, seed: 51, ..WorkloadSpec::default() };
    let one = scaling_run(1, 2, &spec).expect("1 server");
    let four = scaling_run(4, 2, &spec).expect("4 servers");
    let ratio = four.throughput() / one.throughput();
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let pass = ratio >= 1.5 && one.passed() && four.passed();
    report(
        7,
        "scaling 4 vs 1 server",
        pass,
        format!("1 server {:.0} ops/s, 4 servers {:.0} ops/s, ratio {ratio:.2} on {cores} cpu(s)", one.throughput(), four.throughput()),
    );
    assert!(one.passed() && four.passed(), "{:?} {:?}", one.breaches, four.breaches);
    // servers share this machine's cores; with a single core there is
    // nothing to scale onto and the ratio is reported, not asserted
    if cores >= 2 {
        assert!(pass);
    }
}

#[test]
fn c08_split_merge_inverse() {
    let _s = serial();
    let r = split_merge_inverse(100, 61);
    let pass = r.as_ref().is_ok_and(|&n| n >= 90);
    report(8, "split/merge inverse", pass, format!("{r:?} cycles completed, key set unchanged after each"));
    assert!(pass);
}

#[test]
fn c09_balancer_convergence() {
    let _s = serial();
    let r = convergence_run(50_000, 125, 10, 71);
    let pass = r.as_ref().is_ok_and(|o| o.splits_after == 0 && o.max_size <= 125 + 8 && o.total_size == 50_000);
    report(9, "balancer convergence", pass, format!("{r:?}"));
    assert!(pass);
}

#[test]
fn c10_registry_and_rdcss_oracles() {
    let _s = serial();
    let mismatches = registry_oracle(10_000, 81);
    let model = rdcss_model::check_all(4);
    let pass = mismatches == 0 && model.is_ok();
    report(
        10,
        "registry + rdcss oracles",
        pass,
        format!("10000 lookups, {mismatches} mismatches; rdcss model: {model:?} states explored"),
    );
    assert!(pass);
}
