//! Seed derivation for named random substreams.
//!
//! Every source of randomness in a run derives from one master seed through
//! `(master, stream name, index)` so that controlled A/B experiments share
//! identical draws everywhere except the path under test.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the stream name; stable across platforms and releases.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Derive the seed for substream `name[index]` of `master`.
pub fn derive(master: u64, name: &str, index: u64) -> u64 {
    let mut h = fnv1a(name.as_bytes());
    h ^= master.rotate_left(17);
    h = h.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    h ^= index.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    // splitmix64 finalizer
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^= h >> 31;
    h
}

/// RNG for substream `name[index]` of `master`.
pub fn stream(master: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, name, index))
}

/// Two standard normal draws via Box-Muller.
pub fn normal_pair(rng: &mut impl rand::Rng) -> (f64, f64) {
    // u1 in (0, 1] so the log is finite.
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    let r = (-2.0 * u1.ln()).sqrt();
    let th = 2.0 * std::f64::consts::PI * u2;
    (r * th.cos(), r * th.sin())
}

/// Fill `out` with standard normal draws.
pub fn fill_normal(rng: &mut impl rand::Rng, out: &mut [f64]) {
    let mut i = 0;
    while i < out.len() {
        let (a, b) = normal_pair(rng);
        out[i] = a;
        if i + 1 < out.len() {
            out[i + 1] = b;
        }
        i += 2;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_deterministic_and_distinct() {
        assert_eq!(derive(7, "corpus", 3), derive(7, "corpus", 3));
        assert_ne!(derive(7, "corpus", 3), derive(7, "corpus", 4));
        assert_ne!(derive(7, "corpus", 3), derive(7, "augment", 3));
        assert_ne!(derive(7, "corpus", 3), derive(8, "corpus", 3));
    }

    #[test]
    fn normal_moments_are_plausible() {
        let mut rng = stream(0, "test-normal", 0);
        let mut xs = vec![0.0; 20_000];
        fill_normal(&mut rng, &mut xs);
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
