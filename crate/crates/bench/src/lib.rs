//! Benchmarks for the modelling pipeline live in `benches/`; run them with
//! `cargo bench -p wqms-bench`.
