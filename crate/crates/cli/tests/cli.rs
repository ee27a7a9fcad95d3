use std::process::Command;

fn dili(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dili")).args(args).output().expect("run dili")
}

#[test]
fn small_bench_passes_and_writes_both_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.csv");
    let o = dili(&[
        "bench", "--servers", "2", "--backend", "loopback", "--keys", "2000", "--ops", "4000", "--read-pct", "60",
        "--zipf", "0.9", "--seed", "7", "--split-threshold", "64", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rows = csv::Reader::from_path(&out).unwrap();
    let headers = rows.headers().unwrap().clone();
    assert!(headers.iter().any(|h| h == "throughput_ops_s"), "{headers:?}");
    assert_eq!(rows.records().count(), 1);
    assert!(dir.path().join("report.background.csv").exists());
}

#[test]
fn tcp_bench_runs() {
    let o = dili(&["bench", "--servers", "2", "--backend", "tcp", "--keys", "500", "--ops", "1000", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn bad_arguments_exit_with_config_error() {
    assert_eq!(dili(&["bench", "--backend", "carrier-pigeon"]).status.code(), Some(2));
    assert_eq!(dili(&["bench", "--read-pct", "150"]).status.code(), Some(2));
    assert_eq!(dili(&["bench", "--servers", "0"]).status.code(), Some(2));
    assert_eq!(dili(&["verify", "--suite", "nonsense"]).status.code(), Some(2));
}

#[test]
fn serve_rejects_missing_and_malformed_configs() {
    assert_eq!(dili(&["serve", "--config", "/nonexistent/dili.toml"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "server_id = 0\nlisten_addr = \"127.0.0.1:0\"\n[peers]\n1 = \"127.0.0.1:1\"\n").unwrap();
    let o = dili(&["serve", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn quick_verify_checks_pass() {
    for suite in ["offsets", "oracles"] {
        let o = dili(&["verify", "--suite", suite, "--duration", "2s", "--seed", "5"]);
        let stdout = String::from_utf8_lossy(&o.stdout);
        assert_eq!(o.status.code(), Some(0), "{stdout}");
        assert!(stdout.contains("PASS"), "{stdout}");
    }
}
