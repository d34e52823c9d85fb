//! Criterion benchmarks for the dcsam kernels live in `benches/`.
