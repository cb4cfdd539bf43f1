//! Seeded randomness.
//!
//! Every random draw in the crate comes from a ChaCha8 stream cipher
//! generator (`rand_chacha::ChaCha8Rng`), keyed by a 64-bit user seed and a
//! 64-bit stream id. ChaCha is counter based with published constants, so a
//! `(seed, stream)` pair yields the same sequence on every platform.
//!
//! Stream ids combine a purpose tag in the high bits with a counter (an
//! iteration, a ray index, a scene index) in the low bits, so independent
//! consumers never share a sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

/// Purpose tags occupying the top 16 bits of a stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Poses = 1,
    Scene = 2,
    Jitter = 3,
    FitBatch = 4,
    Train = 5,
    Sample = 6,
    Init = 7,
    Test = 8,
}

pub fn stream(seed: u64, purpose: Purpose, counter: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) ^ (counter & 0xFFFF_FFFF_FFFF));
    rng
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn fill_normal(rng: &mut Rng, out: &mut [f64]) {
    for v in out {
        *v = StandardNormal.sample(rng);
    }
}

pub fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    fill_normal(rng, &mut v);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map(|_| stream(7, Purpose::Poses, 0).random()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        let mut x = stream(7, Purpose::Poses, 0);
        let mut y = stream(7, Purpose::Poses, 1);
        let mut z = stream(7, Purpose::Scene, 0);
        let (x, y, z): (u64, u64, u64) = (x.random(), y.random(), z.random());
        assert_ne!(x, y);
        assert_ne!(x, z);
    }
}
