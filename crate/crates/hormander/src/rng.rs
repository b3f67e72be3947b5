//! Counter-based Gaussian noise.
//!
//! Every draw is addressed by `(seed, replication, path, entry)`. The pair
//! `(seed, replication)` selects a ChaCha8 key, the path selects the stream and
//! the entry selects a fixed word offset, so values never depend on the order
//! in which they are requested.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Words consumed per Box–Muller pair (two `u64`).
const WORDS_PER_PAIR: u128 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NoiseKey {
    pub seed: u64,
    pub replication: u64,
}

impl NoiseKey {
    pub fn new(seed: u64, replication: u64) -> Self {
        Self { seed, replication }
    }

    fn key_bytes(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"hormander/noise/v1");
        h.update(self.seed.to_le_bytes());
        h.update(self.replication.to_le_bytes());
        let out = h.finalize();
        let mut k = [0u8; 32];
        k.copy_from_slice(&out);
        k
    }

    /// Generator positioned at the start of `path`.
    pub fn stream(&self, path: u64) -> GaussianStream {
        let mut rng = ChaCha8Rng::from_seed(self.key_bytes());
        rng.set_stream(path);
        GaussianStream { rng }
    }
}

pub struct GaussianStream {
    rng: ChaCha8Rng,
}

#[inline]
fn open_unit(x: u64) -> f64 {
    // (0, 1]: never zero, so the logarithm below is finite.
    ((x >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[inline]
fn box_muller(u1: u64, u2: u64) -> (f64, f64) {
    let r = (-2.0 * open_unit(u1).ln()).sqrt();
    let (s, c) = (std::f64::consts::TAU * open_unit(u2)).sin_cos();
    (r * c, r * s)
}

impl GaussianStream {
    /// Standard normals for entries `start..start + out.len()`.
    pub fn fill(&mut self, start: usize, out: &mut [f64]) {
        if out.is_empty() {
            return;
        }
        let first_pair = start / 2;
        self.rng.set_word_pos(first_pair as u128 * WORDS_PER_PAIR);
        let mut e = start;
        let end = start + out.len();
        let mut i = 0;
        if e % 2 == 1 {
            let (_, z1) = self.next_pair();
            out[i] = z1;
            i += 1;
            e += 1;
        }
        while e + 1 < end {
            let (z0, z1) = self.next_pair();
            out[i] = z0;
            out[i + 1] = z1;
            i += 2;
            e += 2;
        }
        if e < end {
            let (z0, _) = self.next_pair();
            out[i] = z0;
        }
    }

    #[inline]
    fn next_pair(&mut self) -> (f64, f64) {
        let u1 = self.rng.next_u64();
        let u2 = self.rng.next_u64();
        box_muller(u1, u2)
    }

    /// Single standard normal at `entry`.
    pub fn at(&mut self, entry: usize) -> f64 {
        let mut z = [0.0];
        self.fill(entry, &mut z);
        z[0]
    }
}

/// Seeds from the CLI may be decimal or `0x`-prefixed hex.
pub fn parse_seed(s: &str) -> Option<u64> {
    let t = s.trim();
    if let Some(h) = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        u64::from_str_radix(h, 16).ok()
    } else {
        t.parse().ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_access_matches_sequential() {
        let key = NoiseKey::new(7, 0);
        let mut all = vec![0.0; 37];
        key.stream(3).fill(0, &mut all);
        for start in [0usize, 1, 4, 11, 36] {
            let mut part = vec![0.0; 37 - start];
            key.stream(3).fill(start, &mut part);
            assert_eq!(&all[start..], &part[..]);
        }
        assert_eq!(key.stream(3).at(17), all[17]);
    }

    #[test]
    fn streams_and_replications_differ() {
        let a = NoiseKey::new(1, 0).stream(0).at(0);
        let b = NoiseKey::new(1, 0).stream(1).at(0);
        let c = NoiseKey::new(1, 1).stream(0).at(0);
        assert!(a != b && a != c && b != c);
    }

    #[test]
    fn seed_parsing() {
        assert_eq!(parse_seed("42"), Some(42));
        assert_eq!(parse_seed("0x2A"), Some(42));
        assert_eq!(parse_seed("zz"), None);
    }
}
