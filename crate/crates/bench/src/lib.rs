//! Criterion benchmarks for the detection and peephole kernels; see `benches/`.
