//! Shared fixtures for the criterion benchmarks.

use sapl_core::Tensor;

/// Deterministic pseudo-random tensor without pulling an RNG into the hot
/// path setup.
pub fn patterned_tensor(shape: &[usize], salt: u64) -> Tensor {
    Tensor::from_fn(shape, |i| {
        let x = (i as u64).wrapping_mul(6364136223846793005).wrapping_add(salt);
        // map the top bits to [0, 1)
        (x >> 11) as f64 / (1u64 << 53) as f64
    })
}
