//! Criterion benchmarks for the kernels and the training loop live in `benches/`.
