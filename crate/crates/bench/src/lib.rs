//! Criterion benchmarks for the gmn-core hot paths; see `benches/`.
