//! Explicit random streams. Nothing in the crate draws from global state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::real::Real;
use crate::tensor::Tensor;

pub type Stream = ChaCha8Rng;

pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mix a base seed with stream labels into an independent seed (splitmix64).
pub fn derive(seed: u64, labels: &[u64]) -> u64 {
    let mut x = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &l in labels {
        x = splitmix(x ^ splitmix(l.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    splitmix(x)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn normal<R: Real>(rng: &mut Stream) -> R {
    let x: f64 = rng.sample(StandardNormal);
    R::of(x)
}

pub fn normal_tensor<R: Real>(rng: &mut Stream, shape: &[usize]) -> Tensor<R> {
    Tensor::from_fn(shape, |_| normal(rng))
}

pub fn uniform(rng: &mut Stream, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}
