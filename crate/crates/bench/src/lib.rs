//! Criterion benchmarks for the quantizers, matrix products and the
//! denoiser forward pass. Run with `cargo bench -p qedlm-bench`.
