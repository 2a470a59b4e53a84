//! Shared fixtures for the pipeline benchmarks.

use cgir_core::graph::{apply_missing_mask, generate_sbm, AttributeGraph, MissingMask};

/// Standard planted-partition instance at a given size.
pub fn bench_instance(n: usize) -> (AttributeGraph, MissingMask) {
    let graph = generate_sbm(n, 5, 0.1, 0.01, 16, 6.0, 42).expect("valid parameters");
    let (_, mask) = apply_missing_mask(&graph, 0.4, 7).expect("valid ratio");
    (graph, mask)
}
