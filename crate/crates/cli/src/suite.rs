//! `dili verify`: scaled-down versions of the acceptance harnesses, one
//! line per check. `--duration` sets the long mixed run; everything else
//! uses fixed sizes so a full pass takes a couple of minutes.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use dili_core::runtime::MAX_HOPS;
use dili_core::verify::linearizability::Verdict;
use dili_core::verify::rdcss_model;
use dili_core::verify::suite::*;

type Check = fn(Duration, u64) -> Result<String, String>;

const CHECKS: &[(&str, Check)] = &[
    ("linearizability", linearizability),
    ("replay", replay),
    ("hops", hops),
    ("offsets", offsets),
    ("subhead", subhead),
    ("progress", progress),
    ("inverse", inverse),
    ("convergence", convergence),
    ("oracles", oracles),
];

pub fn run(which: &str, duration: Duration, seed: u64) -> ExitCode {
    let selected: Vec<_> = CHECKS.iter().filter(|(n, _)| which == "all" || *n == which).collect();
    if selected.is_empty() {
        let names: Vec<_> = CHECKS.iter().map(|(n, _)| *n).collect();
        eprintln!("error: unknown suite {which:?}; expected all or one of {}", names.join(", "));
        return ExitCode::from(crate::CONFIG);
    }
    let mut failed = 0;
    for (name, check) in selected {
        let started = Instant::now();
        let result = check(duration, seed);
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("{name:<16} PASS  {detail} ({secs:.1} s)"),
            Err(detail) => {
                failed += 1;
                println!("{name:<16} FAIL  seed {seed}: {detail} ({secs:.1} s)");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(crate::BREACH)
    }
}

fn linearizability(_: Duration, seed: u64) -> Result<String, String> {
    let trials = 200;
    let mut unchecked = 0;
    for s in seed..seed + trials {
        let t = linearizability_trial(s, 8, 50, false);
        match t.report.verdict() {
            Verdict::Linearizable => {}
            Verdict::Unchecked => unchecked += 1,
            Verdict::Violation => {
                let v = t.report.violation.map(|v| v.to_string()).unwrap_or_default();
                return Err(format!("trial seed {s} ({:?}) is not linearizable:\n{v}", t.shape));
            }
        }
    }
    Ok(format!("{trials} histories, {unchecked} over budget"))
}

fn replay(_: Duration, seed: u64) -> Result<String, String> {
    let runs = 100;
    let mut raced = 0;
    for s in seed..seed + runs {
        let o = replay_trial(s).map_err(|e| format!("trial seed {s}: {e}"))?;
        raced += (o.replicated > 0) as u32;
    }
    Ok(format!("{runs} moves rebuilt exactly, {raced} raced the copy"))
}

fn hops(_: Duration, seed: u64) -> Result<String, String> {
    let (quiet, _) = hop_run(20_000, false, seed)?;
    let (busy, moves) = hop_run(20_000, true, seed + 1)?;
    if quiet.max_hops() > 2 || busy.max_hops() > MAX_HOPS || quiet.hop_breaches + busy.hop_breaches > 0 {
        return Err(format!("hop histograms {:?} / {:?}", quiet.hops, busy.hops));
    }
    Ok(format!("max {} without moves, {} with {moves} moves", quiet.max_hops(), busy.max_hops()))
}

fn offsets(_: Duration, seed: u64) -> Result<String, String> {
    let o = offset_run(100, seed)?;
    Ok(format!("{} splits, {} merges conserved the offset sum", o.splits, o.merges))
}

fn subhead(duration: Duration, seed: u64) -> Result<String, String> {
    let o = subhead_run(duration, Duration::from_millis(100), seed)?;
    Ok(format!("{} snapshots, {} background ops, no overlap", o.samples, o.background_ops))
}

fn progress(duration: Duration, seed: u64) -> Result<String, String> {
    let baseline = (duration / 10).clamp(Duration::from_millis(500), Duration::from_secs(3));
    let window = (duration / 4).clamp(Duration::from_secs(1), Duration::from_secs(10));
    let o = progress_run(4, baseline, window, seed)?;
    if o.suspended_per_thread <= 0.0 || o.maintenance_waits > 0 {
        return Err(format!("{o:?}"));
    }
    Ok(format!(
        "{:.0} ops/s per thread with a stalled peer vs {:.0} baseline",
        o.suspended_per_thread, o.baseline_per_thread
    ))
}

fn inverse(_: Duration, seed: u64) -> Result<String, String> {
    let n = split_merge_inverse(50, seed)?;
    Ok(format!("{n} split+merge cycles restored the structure"))
}

fn convergence(_: Duration, seed: u64) -> Result<String, String> {
    let o = convergence_run(20_000, 125, 10, seed)?;
    if o.splits_after > 0 || o.max_size > 133 {
        return Err(format!("{o:?}"));
    }
    Ok(format!("settled in {} ticks, largest sublist {}", o.settle_ticks, o.max_size))
}

fn oracles(_: Duration, seed: u64) -> Result<String, String> {
    let mismatches = registry_oracle(100_000, seed);
    if mismatches > 0 {
        return Err(format!("{mismatches} registry lookups disagree with the linear oracle"));
    }
    let states = rdcss_model::check_all(3)?;
    Ok(format!("registry matches oracle; RDCSS model {states} states"))
}
