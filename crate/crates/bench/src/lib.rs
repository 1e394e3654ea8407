//! Benchmark inputs shared by the criterion targets.

use tracecast::Tensor;

/// Deterministic pseudo-random tensor with entries in `[-1, 1)`.
pub fn filled(shape: &[usize], seed: u64) -> Tensor {
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    Tensor::from_fn(shape, |_| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 52) as f64 - 1.0
    })
}
