use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use dili_core::runtime::{bootstrap, Backend, Cluster, ServerConfig, Tuning};
use dili_core::verify::report::{background_path, render_text, write_csv};
use dili_core::verify::workload::{run_workload, WorkloadSpec};

mod suite;

/// Exit status: invariant breach.
const BREACH: u8 = 1;
/// Exit status: bad configuration or arguments.
const CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "dili", version, about = "Distributed lock-free sorted list")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Loopback,
    Tcp,
}

#[derive(Subcommand)]
enum Cmd {
    /// Load keys, run a Zipfian workload and report throughput and latency.
    Bench {
        #[arg(long, default_value_t = 1)]
        servers: usize,
        #[arg(long, value_enum, default_value = "loopback")]
        backend: BackendArg,
        #[arg(long, default_value_t = 10_000)]
        keys: u64,
        #[arg(long, default_value_t = 20_000)]
        ops: u64,
        /// Percentage of finds; the rest splits evenly into inserts and removes.
        #[arg(long, default_value_t = 50.0)]
        read_pct: f64,
        #[arg(long, default_value_t = 0.99)]
        zipf: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 125)]
        split_threshold: i64,
        #[arg(long, default_value_t = 4)]
        clients: usize,
        /// Concurrent client operations each server admits.
        #[arg(long, default_value_t = 4)]
        workers: usize,
        /// Balancer period; 0 turns the balancer off.
        #[arg(long, default_value_t = 100)]
        balancer_ms: u64,
        /// Summary CSV; per-operation split/move latencies go next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the property suite on in-process clusters.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
        /// Length of the long mixed run (e.g. 60s, 2m).
        #[arg(long, value_parser = humantime::parse_duration, default_value = "60s")]
        duration: Duration,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Start one server from a TOML config and serve until interrupted.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().cmd {
        Cmd::Bench { servers, backend, keys, ops, read_pct, zipf, seed, split_threshold, clients, workers, balancer_ms, out } => {
            let spec = WorkloadSpec { keys, ops, read_fraction: read_pct / 100.0, zipf, seed, clients };
            let tuning = Tuning { split_threshold, workers, balancer_period_ms: balancer_ms, ..Tuning::default() };
            bench(spec, servers, backend, tuning, out)
        }
        Cmd::Verify { suite, duration, seed } => suite::run(&suite, duration, seed),
        Cmd::Serve { config } => serve(config),
    }
}

fn config_error(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(CONFIG)
}

fn bench(spec: WorkloadSpec, servers: usize, backend: BackendArg, tuning: Tuning, out: Option<PathBuf>) -> ExitCode {
    if let Err(e) = spec.validate() {
        return config_error(e);
    }
    if tuning.split_threshold < 2 || tuning.workers == 0 {
        return config_error("split threshold must be at least 2 and workers positive");
    }
    let (backend, label) = match backend {
        BackendArg::Loopback => (Backend::Loopback, "loopback"),
        BackendArg::Tcp => (Backend::Tcp, "tcp"),
    };
    let cluster = match Cluster::build(backend, servers, spec.key_range(), tuning) {
        Ok(c) => Arc::new(c),
        Err(e) => return config_error(e),
    };
    cluster.start_balancers();
    let report = run_workload(&spec, &cluster, None);
    cluster.shutdown();
    print!("{}", render_text(&report, label));
    if let Some(path) = out {
        if let Err(e) = write_csv(&report, label, &path) {
            eprintln!("error: cannot write {}: {e}", path.display());
            return ExitCode::from(CONFIG);
        }
        println!("wrote {} and {}", path.display(), background_path(&path).display());
    }
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(BREACH)
    }
}

fn serve(path: PathBuf) -> ExitCode {
    let cfg = match ServerConfig::load(&path) {
        Ok(c) => c,
        Err(e) => return config_error(e),
    };
    let running = match bootstrap(&cfg) {
        Ok(r) => r,
        Err(e) => return config_error(e),
    };
    println!("server {} listening on {}", cfg.server_id, running.local_addr());
    let (tx, rx) = std::sync::mpsc::channel();
    if let Err(e) = ctrlc::set_handler(move || {
        let _ = tx.send(());
    }) {
        log::warn!("event=no_signal_handler error=\"{e}\"");
    }
    let _ = rx.recv();
    running.shutdown();
    let breaches = running.server.stats.hop_breaches.load(std::sync::atomic::Ordering::SeqCst);
    if breaches > 0 {
        eprintln!("{breaches} operations exceeded the hop bound");
        return ExitCode::from(BREACH);
    }
    ExitCode::SUCCESS
}
