//! Criterion benchmarks for sgq-core; see `benches/`.
