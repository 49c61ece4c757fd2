//! Shared input builders for the criterion benches.

use m4fuse_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(dims: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .expect("benchmark tensor dims are static")
}

/// Scan operands at width `c`, state size `d`, with decay magnitudes kept
/// below one so long sequences stay finite.
pub fn scan_inputs(l: usize, c: usize, d: usize) -> [Tensor<f32>; 4] {
    let x = random_tensor(&[1, l, c], 1);
    let mut abar = random_tensor(&[d], 2);
    for v in abar.data_mut() {
        *v = 0.2 + 0.75 * v.abs();
    }
    let bbar = random_tensor(&[d, c], 3);
    let cout = random_tensor(&[c, d], 4);
    [x, abar, bbar, cout]
}
