use std::sync::Arc;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion, Throughput};
use dili_core::verify::workload::{run_workload, WorkloadSpec};
use dili_core::{Backend, Cluster, Entry, Key, NodeRef, OpKind, Registry, Tuning};

const KEYS: Key = 20_000;

fn loaded(servers: usize) -> Cluster {
    let tuning = Tuning { balancer_period_ms: 0, ..Tuning::default() };
    let c = Cluster::build(Backend::Loopback, servers, (0, KEYS), tuning).unwrap();
    for k in (0..KEYS).step_by(2) {
        c.execute(0, OpKind::Insert, k).unwrap();
    }
    while c.tick_all().acted() {}
    c
}

fn client_ops(c: &mut Criterion) {
    let mut g = c.benchmark_group("client_op");
    for servers in [1, 4] {
        let cluster = loaded(servers);
        let mut k: Key = 0;
        g.bench_with_input(BenchmarkId::new("find", servers), &servers, |b, _| {
            b.iter(|| {
                k = (k + 7919) % KEYS;
                cluster.execute(0, OpKind::Find, k).unwrap()
            })
        });
        g.bench_with_input(BenchmarkId::new("insert_remove", servers), &servers, |b, _| {
            b.iter(|| {
                k = ((k + 7919) % KEYS) | 1;
                cluster.execute(0, OpKind::Insert, k).unwrap();
                cluster.execute(0, OpKind::Remove, k).unwrap()
            })
        });
        cluster.shutdown();
    }
    g.finish();
}

fn registry_lookup(c: &mut Criterion) {
    let mut g = c.benchmark_group("registry_get_by_key");
    for n in [16usize, 1024] {
        let reg = Registry::with_capacity(n + 1);
        let width = KEYS / n as Key;
        for i in 0..n as Key {
            let hi = if i == n as Key - 1 { Key::MAX } else { (i + 1) * width - 1 };
            let lo = if i == 0 { Key::MIN } else { i * width };
            reg.add_entry(Entry::routing(NodeRef::NULL, lo, hi)).unwrap();
        }
        let mut k: Key = 0;
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| {
                k = (k + 7919) % KEYS;
                reg.get_by_key(k)
            })
        });
    }
    g.finish();
}

fn workload(c: &mut Criterion) {
    let mut g = c.benchmark_group("zipf_workload");
    g.sample_size(10).measurement_time(Duration::from_secs(10));
    let spec = WorkloadSpec { keys: 5_000, ops: 10_000, ..WorkloadSpec::default() };
    g.throughput(Throughput::Elements(spec.ops));
    for servers in [1, 2, 4] {
        g.bench_with_input(BenchmarkId::new("loopback", servers), &servers, |b, &servers| {
            b.iter_batched(
                || Arc::new(Cluster::build(Backend::Loopback, servers, spec.key_range(), Tuning::default()).unwrap()),
                |cluster| {
                    let r = run_workload(&spec, &cluster, None);
                    cluster.shutdown();
                    r.ops_done
                },
                BatchSize::PerIteration,
            )
        });
    }
    g.finish();
}

criterion_group!(benches, client_ops, registry_lookup, workload);
criterion_main!(benches);
