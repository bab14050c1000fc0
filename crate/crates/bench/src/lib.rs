//! Criterion benchmarks for the tensor kernels and a training epoch; see `benches/`.
