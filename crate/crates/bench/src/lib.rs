//! Criterion benchmarks for the N-Grammer layer live in `benches/`.
