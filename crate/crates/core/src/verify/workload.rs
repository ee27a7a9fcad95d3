//! Seeded Zipfian client workloads.

use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use super::history::Recorder;
use super::monitors::{registry_breaches, Counters};
use crate::node::Key;
use crate::runtime::Cluster;
use crate::transport::OpKind;

#[derive(Clone, Debug, PartialEq)]
pub struct WorkloadSpec {
    /// Keys inserted by the load phase; also the key universe `[0, keys)`.
    pub keys: u64,
    /// Operations in the op phase, over all clients.
    pub ops: u64,
    pub read_fraction: f64,
    pub zipf: f64,
    pub seed: u64,
    pub clients: usize,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec { keys: 10_000, ops: 20_000, read_fraction: 0.5, zipf: 0.99, seed: 1, clients: 4 }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.keys == 0 || self.clients == 0 {
            return Err("keys and clients must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.read_fraction) {
            return Err(format!("read fraction {} outside [0, 1]", self.read_fraction));
        }
        if !(self.zipf >= 0.0 && self.zipf.is_finite()) {
            return Err(format!("zipf exponent {} must be finite and non-negative", self.zipf));
        }
        Ok(())
    }

    /// Key range a cluster should be partitioned over.
    pub fn key_range(&self) -> (Key, Key) {
        (0, self.keys as Key)
    }

    /// Maps popularity rank to key; hot keys are scattered, not adjacent.
    pub fn permutation(&self) -> Vec<Key> {
        let mut keys: Vec<Key> = (0..self.keys as Key).collect();
        keys.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        keys
    }

    fn client_rng(&self, client: usize) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(client as u64 + 1);
        r
    }

    fn client_ops(&self, client: usize) -> u64 {
        let per = self.ops / self.clients as u64;
        per + ((client as u64) < self.ops % self.clients as u64) as u64
    }

    /// The op stream of one client: (entry server, kind, key).
    pub fn generate(&self, client: usize, servers: usize, perm: &[Key]) -> Vec<(usize, OpKind, Key)> {
        let mut rng = self.client_rng(client);
        let zipf = Zipf::new(self.keys as f64, self.zipf).expect("validated spec");
        (0..self.client_ops(client))
            .map(|_| {
                let rank = zipf.sample(&mut rng) as usize - 1;
                let kind = if rng.random_bool(self.read_fraction) {
                    OpKind::Find
                } else if rng.random_bool(0.5) {
                    OpKind::Insert
                } else {
                    OpKind::Remove
                };
                (rng.random_range(0..servers), kind, perm[rank.min(perm.len() - 1)])
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Percentiles {
    pub count: usize,
    pub mean: Duration,
    pub p50: Duration,
    pub p90: Duration,
    pub p99: Duration,
    pub p999: Duration,
    pub max: Duration,
}

impl Percentiles {
    pub fn of(mut samples: Vec<Duration>) -> Percentiles {
        if samples.is_empty() {
            return Percentiles::default();
        }
        samples.sort_unstable();
        let at = |q: f64| samples[((samples.len() as f64 * q).ceil() as usize).clamp(1, samples.len()) - 1];
        Percentiles {
            count: samples.len(),
            mean: samples.iter().sum::<Duration>() / samples.len() as u32,
            p50: at(0.50),
            p90: at(0.90),
            p99: at(0.99),
            p999: at(0.999),
            max: *samples.last().expect("non-empty"),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct WorkloadReport {
    pub spec: WorkloadSpec,
    pub servers: usize,
    pub load_time: Duration,
    pub op_time: Duration,
    pub ops_done: u64,
    pub errors: u64,
    pub latency: Percentiles,
    /// Counter growth over the op phase.
    pub counters: Counters,
    /// Split and move latencies over the whole run.
    pub background: Vec<(&'static str, Percentiles)>,
    /// Every split and move, in completion order per server.
    pub background_ops: Vec<(&'static str, Duration)>,
    pub breaches: Vec<String>,
}

impl WorkloadReport {
    pub fn throughput(&self) -> f64 {
        self.ops_done as f64 / self.op_time.as_secs_f64().max(1e-9)
    }

    pub fn passed(&self) -> bool {
        self.breaches.is_empty()
    }
}

/// Load phase, then op phase, against a running cluster. When `recorder`
/// is given, every op-phase operation is logged for checking.
pub fn run_workload(spec: &WorkloadSpec, cluster: &Arc<Cluster>, recorder: Option<Arc<Recorder>>) -> WorkloadReport {
    let perm = Arc::new(spec.permutation());
    let n = cluster.len();
    let started = Instant::now();
    let loaders: Vec<_> = (0..spec.clients)
        .map(|c| {
            let (cluster, perm, clients) = (Arc::clone(cluster), Arc::clone(&perm), spec.clients);
            thread::spawn(move || {
                let mut errors = 0;
                for (i, &k) in perm.iter().enumerate().skip(c).step_by(clients) {
                    errors += cluster.execute(i % n, OpKind::Insert, k).is_err() as u64;
                }
                errors
            })
        })
        .collect();
    let mut errors: u64 = loaders.into_iter().map(|h| h.join().expect("loader thread")).sum();
    let load_time = started.elapsed();

    let before = Counters::collect(cluster);
    let streams: Vec<_> = (0..spec.clients).map(|c| spec.generate(c, n, &perm)).collect();
    let started = Instant::now();
    let workers: Vec<_> = streams
        .into_iter()
        .enumerate()
        .map(|(c, ops)| {
            let (cluster, rec) = (Arc::clone(cluster), recorder.clone());
            thread::spawn(move || {
                let mut lat = Vec::with_capacity(ops.len());
                let mut errors = 0u64;
                for (at, kind, key) in ops {
                    let t = Instant::now();
                    let r = match &rec {
                        Some(rec) => rec.record(c as u32, kind, key, || cluster.execute(at, kind, key).map(|o| o.value)),
                        None => cluster.execute(at, kind, key).map(|o| o.value),
                    };
                    lat.push(t.elapsed());
                    if let Err(e) = r {
                        errors += 1;
                        log::warn!("event=client_error client={c} key={key} error=\"{e}\"");
                    }
                }
                (lat, errors)
            })
        })
        .collect();
    let mut latencies = Vec::new();
    for w in workers {
        let (l, e) = w.join().expect("client thread");
        latencies.extend(l);
        errors += e;
    }
    let op_time = started.elapsed();
    let counters = Counters::collect(cluster).since(&before);
    let background_ops: Vec<_> = cluster.servers.iter().flat_map(|s| s.background_latencies()).collect();
    let mut breaches = counters.breaches();
    breaches.extend(registry_breaches(cluster));
    WorkloadReport {
        spec: spec.clone(),
        servers: n,
        load_time,
        op_time,
        ops_done: latencies.len() as u64,
        errors,
        latency: Percentiles::of(latencies),
        counters,
        background: background_summary(&background_ops),
        background_ops,
        breaches,
    }
}

fn background_summary(all: &[(&'static str, Duration)]) -> Vec<(&'static str, Percentiles)> {
    ["split", "move"]
        .into_iter()
        .map(|what| (what, Percentiles::of(all.iter().filter(|(w, _)| *w == what).map(|(_, d)| *d).collect())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::Tuning;
    use crate::transport::DeliveryPolicy;

    #[test]
    fn same_seed_same_ops() {
        let spec = WorkloadSpec { seed: 9, ..WorkloadSpec::default() };
        let perm = spec.permutation();
        assert_eq!(perm, spec.permutation());
        assert_eq!(spec.generate(2, 3, &perm), spec.generate(2, 3, &perm));
        assert_ne!(spec.generate(1, 3, &perm), spec.generate(2, 3, &perm));
        let other = WorkloadSpec { seed: 10, ..spec.clone() };
        assert_ne!(spec.generate(2, 3, &perm), other.generate(2, 3, &other.permutation()));
    }

    #[test]
    fn op_mix_follows_the_spec() {
        let spec = WorkloadSpec { ops: 40_000, read_fraction: 0.1, clients: 1, ..WorkloadSpec::default() };
        let ops = spec.generate(0, 1, &spec.permutation());
        assert_eq!(ops.len(), 40_000);
        let count = |k| ops.iter().filter(|o| o.1 == k).count() as f64 / 40_000.0;
        assert!((count(OpKind::Find) - 0.1).abs() < 0.01);
        assert!((count(OpKind::Insert) - 0.45).abs() < 0.01);
        assert!((count(OpKind::Remove) - 0.45).abs() < 0.01);
    }

    #[test]
    fn zipf_skews_towards_hot_ranks() {
        let spec = WorkloadSpec { ops: 20_000, clients: 1, ..WorkloadSpec::default() };
        let perm = spec.permutation();
        let ops = spec.generate(0, 1, &perm);
        let hottest = ops.iter().filter(|o| o.2 == perm[0]).count() as f64 / ops.len() as f64;
        // rank 1 of a 0.99 Zipf over 10^4 keys draws roughly 1/H(10^4) ~ 10%
        assert!(hottest > 0.05 && hottest < 0.2, "{hottest}");
    }

    #[test]
    fn op_counts_add_up() {
        let spec = WorkloadSpec { ops: 10, clients: 3, ..WorkloadSpec::default() };
        assert_eq!((0..3).map(|c| spec.client_ops(c)).sum::<u64>(), 10);
    }

    #[test]
    fn percentiles_of_known_samples() {
        let p = Percentiles::of((1..=100).map(Duration::from_micros).collect());
        assert_eq!(p.p50, Duration::from_micros(50));
        assert_eq!(p.p99, Duration::from_micros(99));
        assert_eq!(p.max, Duration::from_micros(100));
        assert_eq!(Percentiles::of(vec![]).count, 0);
    }

    #[test]
    fn smoke_run_on_one_server() {
        let spec = WorkloadSpec { keys: 2_000, ops: 4_000, clients: 2, ..WorkloadSpec::default() };
        let tuning = Tuning { balancer_period_ms: 5, arena_capacity: 1 << 18, ..Tuning::default() };
        let c = Arc::new(Cluster::loopback(1, spec.key_range(), tuning, DeliveryPolicy::default()).unwrap());
        c.start_balancers();
        let r = run_workload(&spec, &c, None);
        c.shutdown();
        assert_eq!(r.ops_done, 4_000);
        assert_eq!(r.errors, 0);
        assert!(r.passed(), "{:?}", r.breaches);
        assert_eq!(r.counters.max_hops(), 1);
        assert!(r.throughput() > 0.0);
    }
}
