//! Criterion benchmarks for `mfccnoise`; see `benches/pipeline.rs`.
