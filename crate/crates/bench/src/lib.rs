//! Criterion benchmarks of the reduced models; see `benches/rom_step.rs`.
