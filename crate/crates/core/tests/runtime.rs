use std::collections::BTreeMap;
use std::net::{SocketAddr, TcpListener};
use std::sync::atomic::Ordering::SeqCst;
use std::sync::Arc;
use std::thread;

use dili_core::runtime::{bootstrap, Cluster, ServerConfig, Tuning, MAX_HOPS};
use dili_core::transport::{DeliveryPolicy, OpKind};

fn quiet() -> Tuning {
    Tuning { balancer_period_ms: 0, workers: 2, arena_capacity: 1 << 18, ..Tuning::default() }
}

fn loopback(n: usize) -> Cluster {
    Cluster::loopback(n, (0, 1000), quiet(), DeliveryPolicy::default()).unwrap()
}

#[test]
fn bootstrap_tiles_the_key_space_and_starts_empty() {
    let c = loopback(2);
    for s in &c.servers {
        let snap = s.shard().registry.snapshot();
        assert_eq!(snap.len(), 2);
        snap.check_total().unwrap();
        for k in [-5, 0, 1, 499, 500, 501, 10_000] {
            assert!(!s.find(k).unwrap());
        }
    }
    c.shutdown();
}

#[test]
fn identical_config_gives_identical_registries() {
    let describe = |c: &Cluster| -> Vec<Vec<(i64, i64, u64)>> {
        c.servers
            .iter()
            .map(|s| {
                let snap = s.shard().registry.snapshot();
                snap.entries().iter().map(|e| (e.key_min(), e.key_max(), e.subhead().raw())).collect()
            })
            .collect()
    };
    let (a, b) = (loopback(3), loopback(3));
    assert_eq!(describe(&a), describe(&b));
    a.shutdown();
    b.shutdown();
}

#[test]
fn hop_counts_for_local_and_remote_keys() {
    let c = loopback(2);
    let s0 = c.server(0);
    assert_eq!(s0.execute(OpKind::Insert, 10).unwrap().hops, 1);
    let remote = s0.execute(OpKind::Insert, 900).unwrap();
    assert_eq!((remote.value, remote.hops), (true, 2));
    assert!(c.server(1).find(900).unwrap());
    assert!(!s0.insert(900).unwrap());
    assert!(s0.remove(900).unwrap());
    assert!(!c.server(1).find(900).unwrap());
    let h = s0.stats.hop_histogram();
    assert_eq!(h[0], 1);
    assert_eq!(h[2..].iter().sum::<u64>(), 0);
    c.shutdown();
}

#[test]
fn finds_during_moves_visit_at_most_three_servers() {
    let c = Arc::new(loopback(3));
    for k in (0..300).step_by(7) {
        c.server(0).insert(k).unwrap();
    }
    let stop = Arc::new(std::sync::atomic::AtomicBool::new(false));
    let reader = {
        let (c, stop) = (Arc::clone(&c), Arc::clone(&stop));
        thread::spawn(move || {
            let mut max = 0;
            while !stop.load(SeqCst) {
                for k in (0..300).step_by(7) {
                    let o = c.execute(1, OpKind::Find, k).unwrap();
                    assert!(o.value, "lost {k}");
                    max = max.max(o.hops);
                }
            }
            max
        })
    };
    for (from, to) in [(0, 2), (2, 1), (1, 0), (0, 2)] {
        let e = c.server(from).shard().registry.get_by_key(100).unwrap();
        c.server(from).shard().move_sublist(&e, to).unwrap();
    }
    stop.store(true, SeqCst);
    assert!(reader.join().unwrap() <= MAX_HOPS);
    c.shutdown();
}

#[test]
fn balancer_splits_oversized_sublists() {
    let c = loopback(1);
    let s = c.server(0);
    for k in 0..300 {
        s.insert(k).unwrap();
    }
    let r = c.tick_all();
    assert_eq!(r.splits, 1);
    // 150 + 150, then each half once more
    assert_eq!(c.tick_all().splits, 2);
    assert_eq!(c.tick_all().splits, 0);
    let shard = s.shard();
    for e in shard.owned_entries() {
        assert!(shard.arena.pair(e.pair()).size.load(SeqCst) <= 125);
    }
    c.shutdown();
}

#[test]
fn balanced_cluster_takes_no_action() {
    let c = loopback(2);
    for k in (0..1000).step_by(20) {
        c.server(0).insert(k).unwrap();
    }
    assert!(!c.tick_all().acted());
    assert!(!c.tick_all().acted());
    c.shutdown();
}

#[test]
fn balancer_converges_and_then_stays_idle() {
    let tuning = Tuning { split_threshold: 32, move_cooldown_ms: 0, ..quiet() };
    let c = Cluster::loopback(3, (0, 3000), tuning, DeliveryPolicy::default()).unwrap();
    // everything lands on server 0
    for k in 0..600 {
        c.server(1).insert(k).unwrap();
    }
    let mut rounds = 0;
    while c.tick_all().acted() {
        rounds += 1;
        assert!(rounds < 100, "balancer did not converge");
    }
    for _ in 0..3 {
        assert!(!c.tick_all().acted());
    }
    let loads: Vec<i64> = c.servers.iter().map(|s| s.shard().load_estimate()).collect();
    assert_eq!(loads.iter().sum::<i64>(), 600);
    let fair = 600.0 / 3.0;
    for (i, l) in loads.iter().enumerate() {
        assert!(*l as f64 <= 1.10 * fair + 32.0, "server {i} holds {l} of {loads:?}");
    }
    for k in (0..600).step_by(13) {
        assert!(c.server(2).find(k).unwrap());
    }
    for s in &c.servers {
        for e in s.shard().owned_entries() {
            assert!(s.shard().arena.pair(e.pair()).size.load(SeqCst) <= 32);
        }
    }
    c.shutdown();
}

#[test]
fn periodic_balancer_under_client_load() {
    let tuning = Tuning { split_threshold: 16, balancer_period_ms: 2, move_cooldown_ms: 5, ..quiet() };
    let c = Arc::new(Cluster::loopback(3, (0, 3000), tuning, DeliveryPolicy::default()).unwrap());
    c.start_balancers();
    let hs: Vec<_> = (0..3)
        .map(|t| {
            let c = Arc::clone(&c);
            thread::spawn(move || {
                for i in 0..400 {
                    let k = i * 3 + t;
                    assert!(c.execute(t as usize, OpKind::Insert, k).unwrap().value);
                    let o = c.execute((t as usize + 1) % 3, OpKind::Find, k).unwrap();
                    assert!(o.value, "lost {k}");
                    assert!(o.hops <= MAX_HOPS);
                }
            })
        })
        .collect();
    hs.into_iter().for_each(|h| h.join().unwrap());
    c.stop_balancers();
    for k in 0..1200 {
        assert!(c.server(0).find(k).unwrap(), "lost {k}");
    }
    for s in &c.servers {
        assert_eq!(s.stats.hop_breaches.load(SeqCst), 0);
        assert_eq!(s.shard().stats.maintenance_waits.load(SeqCst), 0);
    }
    c.shutdown();
}

#[test]
fn tcp_cluster_serves_and_balances() {
    let tuning = Tuning { split_threshold: 16, move_cooldown_ms: 0, ..quiet() };
    let c = Cluster::tcp(2, (0, 1000), tuning).unwrap();
    for k in (0..400).step_by(2) {
        assert!(c.server(1).insert(k).unwrap());
    }
    let mut rounds = 0;
    while c.tick_all().acted() {
        rounds += 1;
        assert!(rounds < 100);
    }
    assert!(c.server(1).shard().load_estimate() > 0);
    for k in 0..400 {
        assert_eq!(c.server(0).find(k).unwrap(), k % 2 == 0);
    }
    c.shutdown();
}

fn free_addr() -> SocketAddr {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap()
}

#[test]
fn servers_bootstrapped_from_config_talk_to_each_other() {
    let addrs = [free_addr(), free_addr()];
    let peers: BTreeMap<u16, SocketAddr> = addrs.iter().enumerate().map(|(i, a)| (i as u16, *a)).collect();
    let running: Vec<_> = (0..2u16)
        .map(|id| {
            let mut text = format!(
                "server_id = {id}\nlisten_addr = \"{}\"\nkey_range = [0, 100]\nbalancer_period_ms = 0\narena_capacity = 65536\n[peers]\n",
                addrs[id as usize]
            );
            for (p, a) in &peers {
                text.push_str(&format!("{p} = \"{a}\"\n"));
            }
            let cfg = ServerConfig::from_toml(&text).unwrap();
            bootstrap(&cfg).unwrap()
        })
        .collect();
    assert!(running[0].server.insert(75).unwrap());
    assert!(running[1].server.find(75).unwrap());
    assert_eq!(running[0].server.execute(OpKind::Find, 75).unwrap().hops, 2);
    running.iter().for_each(|r| r.shutdown());
}
