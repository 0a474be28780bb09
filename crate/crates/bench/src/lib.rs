//! Shared fixtures for the criterion benchmarks in `benches/`.

use attnforge::{builtin, AttentionSpec, ProblemInstance};

/// A built-in variant with both sequence lengths set to `seq` and one head,
/// plus a seeded instance.
pub fn fixture(name: &str, seq: usize) -> (AttentionSpec, ProblemInstance) {
    let b = builtin(name).expect("built-in variant");
    let spec = b.with_dims(attnforge::AttnDims { batch: 1, heads: 1, seq_q: seq, seq_k: seq, ..b.dims });
    let inst = ProblemInstance::random(&spec, 7);
    (spec, inst)
}
