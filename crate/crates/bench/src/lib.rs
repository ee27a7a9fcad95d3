//! Benchmarks live in `benches/`; run them with `cargo bench -p dili-bench`.
