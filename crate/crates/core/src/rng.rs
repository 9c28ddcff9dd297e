//! Deterministic random streams.
//!
//! Every random draw in the crate comes from a ChaCha20 generator. A stream
//! is addressed by a root seed plus a key of up to three integers
//! (for example node id, data index and epoch). The key is hashed into the
//! 64-bit ChaCha stream id, so streams never overlap and a draw depends only
//! on its address, not on what was drawn before it.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha20Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for the stream `key` under `seed`.
pub fn stream(seed: u64, key: &[u64]) -> Rng {
    let mut h = splitmix(key.len() as u64);
    for &k in key {
        h = splitmix(h ^ k);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}

/// Stable 64-bit tag for a string label, for use in stream keys.
pub fn tag(label: &str) -> u64 {
    label
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

pub fn normals(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map(|_| stream(7, &[1, 2]).random()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        let b: u64 = stream(7, &[2, 1]).random();
        let c: u64 = stream(8, &[1, 2]).random();
        assert_ne!(a[0], b);
        assert_ne!(a[0], c);
    }

    #[test]
    fn known_first_draw() {
        // Frozen so that a dependency bump that changes the stream is noticed.
        let x: u64 = stream(0, &[]).random();
        assert_eq!(x, 13841979520242003774);
        let y: u64 = stream(0, &[]).random();
        assert_eq!(x, y);
    }
}
