//! CSV and text renderings of a workload report.

use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::workload::{Percentiles, WorkloadReport};

fn micros(d: std::time::Duration) -> f64 {
    d.as_secs_f64() * 1e6
}

/// One CSV row summarising a run.
#[derive(Debug, Serialize)]
pub struct SummaryRow {
    pub backend: String,
    pub servers: usize,
    pub clients: usize,
    pub keys: u64,
    pub ops: u64,
    pub read_pct: f64,
    pub zipf: f64,
    pub seed: u64,
    pub load_secs: f64,
    pub op_secs: f64,
    pub throughput_ops_s: f64,
    pub errors: u64,
    pub lat_mean_us: f64,
    pub lat_p50_us: f64,
    pub lat_p90_us: f64,
    pub lat_p99_us: f64,
    pub lat_p999_us: f64,
    pub lat_max_us: f64,
    pub hops_1: u64,
    pub hops_2: u64,
    pub hops_3: u64,
    pub hops_over: u64,
    pub splits: u64,
    pub moves: u64,
    pub merges: u64,
    pub split_p50_us: f64,
    pub split_max_us: f64,
    pub move_p50_us: f64,
    pub move_max_us: f64,
    pub sign_violations: u64,
    pub maintenance_waits: u64,
    pub drain_waits: u64,
    pub breaches: usize,
}

#[derive(Debug, Serialize)]
struct BackgroundRow {
    op: &'static str,
    micros: f64,
}

fn bg(r: &WorkloadReport, what: &str) -> Percentiles {
    r.background.iter().find(|b| b.0 == what).map(|b| b.1).unwrap_or_default()
}

impl SummaryRow {
    pub fn of(r: &WorkloadReport, backend: &str) -> SummaryRow {
        let c = &r.counters;
        let (split, mv) = (bg(r, "split"), bg(r, "move"));
        SummaryRow {
            backend: backend.to_string(),
            servers: r.servers,
            clients: r.spec.clients,
            keys: r.spec.keys,
            ops: r.spec.ops,
            read_pct: r.spec.read_fraction * 100.0,
            zipf: r.spec.zipf,
            seed: r.spec.seed,
            load_secs: r.load_time.as_secs_f64(),
            op_secs: r.op_time.as_secs_f64(),
            throughput_ops_s: r.throughput(),
            errors: r.errors,
            lat_mean_us: micros(r.latency.mean),
            lat_p50_us: micros(r.latency.p50),
            lat_p90_us: micros(r.latency.p90),
            lat_p99_us: micros(r.latency.p99),
            lat_p999_us: micros(r.latency.p999),
            lat_max_us: micros(r.latency.max),
            hops_1: c.hops[0],
            hops_2: c.hops[1],
            hops_3: c.hops[2],
            hops_over: c.hops[3..].iter().sum(),
            splits: c.splits,
            moves: c.moves,
            merges: c.merges,
            split_p50_us: micros(split.p50),
            split_max_us: micros(split.max),
            move_p50_us: micros(mv.p50),
            move_max_us: micros(mv.max),
            sign_violations: c.sign_violations,
            maintenance_waits: c.maintenance_waits,
            drain_waits: c.drain_waits,
            breaches: r.breaches.len(),
        }
    }
}

/// Path of the per-operation background latency table next to `out`.
pub fn background_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "report".into());
    out.with_file_name(format!("{stem}.background.csv"))
}

/// Writes the summary row to `out` and every split/move latency to
/// [`background_path`].
pub fn write_csv(r: &WorkloadReport, backend: &str, out: &Path) -> io::Result<()> {
    let mut w = csv::Writer::from_path(out)?;
    w.serialize(SummaryRow::of(r, backend))?;
    w.flush()?;
    let mut w = csv::Writer::from_path(background_path(out))?;
    for &(op, d) in &r.background_ops {
        w.serialize(BackgroundRow { op, micros: micros(d) })?;
    }
    w.flush()
}

pub fn render_text(r: &WorkloadReport, backend: &str) -> String {
    let mut s = String::new();
    let sp = &r.spec;
    let _ = writeln!(
        s,
        "{} server(s) over {backend}, {} clients, {} keys, {} ops, {:.0}% reads, zipf {}, seed {}",
        r.servers,
        sp.clients,
        sp.keys,
        sp.ops,
        sp.read_fraction * 100.0,
        sp.zipf,
        sp.seed
    );
    let _ = writeln!(s, "load      {:.3} s", r.load_time.as_secs_f64());
    let _ = writeln!(s, "ops       {} in {:.3} s = {:.0} ops/s ({} errors)", r.ops_done, r.op_time.as_secs_f64(), r.throughput(), r.errors);
    let l = &r.latency;
    let _ = writeln!(
        s,
        "latency   mean {:.1} p50 {:.1} p90 {:.1} p99 {:.1} p99.9 {:.1} max {:.1} us",
        micros(l.mean),
        micros(l.p50),
        micros(l.p90),
        micros(l.p99),
        micros(l.p999),
        micros(l.max)
    );
    let h = &r.counters.hops;
    let _ = writeln!(s, "hops      1:{} 2:{} 3:{} over:{}", h[0], h[1], h[2], h[3..].iter().sum::<u64>());
    let c = &r.counters;
    let _ = writeln!(s, "maint     splits {} moves {} merges {} aborted moves {}", c.splits, c.moves, c.merges, c.aborted_moves);
    for (what, p) in &r.background {
        if p.count > 0 {
            let _ = writeln!(s, "  {what:<6}  n={} p50 {:.0} us max {:.0} us", p.count, micros(p.p50), micros(p.max));
        }
    }
    if r.breaches.is_empty() {
        let _ = writeln!(s, "monitors  all hold");
    } else {
        for b in &r.breaches {
            let _ = writeln!(s, "BREACH    {b}");
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::workload::WorkloadSpec;
    use std::time::Duration;

    fn sample() -> WorkloadReport {
        let mut r = WorkloadReport {
            spec: WorkloadSpec::default(),
            servers: 2,
            op_time: Duration::from_secs(2),
            ops_done: 1000,
            background_ops: vec![("split", Duration::from_micros(40)), ("move", Duration::from_millis(3))],
            ..WorkloadReport::default()
        };
        r.counters.hops = [700, 300, 0, 0, 0];
        r
    }

    #[test]
    fn csv_has_header_and_one_row() {
        let dir = std::env::temp_dir().join(format!("dili-report-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let out = dir.join("r.csv");
        write_csv(&sample(), "loopback", &out).unwrap();
        let mut rd = csv::Reader::from_path(&out).unwrap();
        let header = rd.headers().unwrap().clone();
        let rows: Vec<_> = rd.records().map(Result::unwrap).collect();
        assert_eq!(rows.len(), 1);
        let col = |name: &str| rows[0][header.iter().position(|h| h == name).unwrap()].to_string();
        assert_eq!(col("throughput_ops_s"), "500.0");
        assert_eq!(col("hops_2"), "300");
        let bg = std::fs::read_to_string(dir.join("r.background.csv")).unwrap();
        assert_eq!(bg, "op,micros\nsplit,40.0\nmove,3000.0\n");
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn text_flags_breaches() {
        let mut r = sample();
        assert!(render_text(&r, "tcp").contains("all hold"));
        r.breaches.push("hop bound".into());
        assert!(render_text(&r, "tcp").contains("BREACH    hop bound"));
    }
}
