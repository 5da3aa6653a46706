//! Seed plumbing. Every random stream is a ChaCha8 generator keyed by a 64-bit seed derived
//! from the base seed and a list of tags, so streams never depend on call order.

use crate::linalg::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a of a label, so string tags like regime names can enter `derive`.
pub fn tag(label: &str) -> u64 {
    label.bytes().fold(0xCBF2_9CE4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01B3))
}

/// Counter-style derivation: fold each tag into the state through splitmix64.
pub fn derive(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(base), |acc, t| splitmix(acc ^ splitmix(*t)))
}

pub fn stream(base: u64, tags: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(base, tags))
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn gaussian(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| std * normal(rng))
}

pub fn gaussian_vec(rng: &mut Rng, len: usize, std: f64) -> Vec<f64> {
    (0..len).map(|_| std * normal(rng)).collect()
}
