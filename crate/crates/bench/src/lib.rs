//! Criterion benchmarks for the training, scoring and sampling kernels.
