//! Criterion benchmarks for the convformer crate; see `benches/`.
