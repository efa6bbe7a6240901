#![allow(dead_code)]

use frat_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Relative error, with magnitudes below 1e-4 compared on an absolute scale.
/// Central differences of an O(10) loss carry ~1e-10 of round-off, which
/// would otherwise swamp gradients that are exactly zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Central difference of `f` at `x` along coordinate `i`.
pub fn central_diff(x: &Tensor, i: usize, mut f: impl FnMut(&Tensor) -> f64) -> f64 {
    let mut plus = x.clone();
    plus.data_mut()[i] += H;
    let mut minus = x.clone();
    minus.data_mut()[i] -= H;
    (f(&plus) - f(&minus)) / (2.0 * H)
}

pub fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}
