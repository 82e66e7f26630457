//! Criterion benchmarks for the matching pipeline; see `benches/matching.rs`.
