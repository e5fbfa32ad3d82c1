//! Criterion benchmarks of the rendering pipeline live in `benches/`.
