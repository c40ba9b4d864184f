//! Benchmarks for the hot paths of `dpml-core` live in `benches/`.
