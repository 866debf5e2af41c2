//! Fixtures shared by the criterion benchmarks of the tensor kernels,
//! quantizer, attention and degradation.

use priorfuse_core::dictionary::Codebook;
use priorfuse_core::{Rng, Tensor};

pub fn image(size: usize, seed: u64) -> Tensor {
    Tensor::rand_uniform([size, size, 3], 0.0, 1.0, &mut Rng::seed(seed))
}

pub fn normal(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, &mut Rng::seed(seed))
}

/// Codebook of `m` entries of width `c` with `n` latents to quantize.
pub fn codebook_case(m: usize, c: usize, n: usize) -> (Codebook, Tensor) {
    (Codebook::init(m, c, 0).expect("valid codebook"), normal(&[n, c], 1))
}
