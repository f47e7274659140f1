//! Criterion benchmarks for the gradient, Hessian and implicit step; see `benches/`.
