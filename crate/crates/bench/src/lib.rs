//! Criterion benchmarks; see `benches/pipeline.rs`.
