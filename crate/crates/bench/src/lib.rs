//! Criterion benchmarks for the hot paths of training and evaluation; see
//! `benches/dts.rs`.
