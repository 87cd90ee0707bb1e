//! Criterion benchmarks for the forward/backward pass, mask construction
//! and decoding. Run with `cargo bench -p a3-bench`.
