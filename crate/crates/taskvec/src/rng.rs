//! Deterministic random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream keyed by
//! SHA-256 of a context string and a user seed. Identical (context, seed)
//! pairs produce identical streams on every platform, which is what makes
//! checkpoints and datasets bit-reproducible.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use sha2::{Digest, Sha256};

pub struct Stream {
    rng: ChaCha8Rng,
}

impl Stream {
    /// Derive a stream from a seed and a context label such as
    /// `"init/encoder.layer.0.attn.q.weight"`.
    pub fn derive(seed: u64, context: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        hasher.update([0u8]);
        hasher.update(context.as_bytes());
        let key: [u8; 32] = hasher.finalize().into();
        Stream {
            rng: ChaCha8Rng::from_seed(key),
        }
    }

    pub fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    /// Uniform in [0, 1) with 24 bits of mantissa.
    pub fn uniform01(&mut self) -> f32 {
        (self.next_u32() >> 8) as f32 / (1u32 << 24) as f32
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.uniform01()
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f32 {
        // Shift into (0, 1] so ln never sees zero.
        let u1 = ((self.next_u32() >> 8) as f64 + 1.0) / (1u64 << 24) as f64;
        let u2 = (self.next_u32() >> 8) as f64 / (1u64 << 24) as f64;
        let r = (-2.0 * u1.ln()).sqrt();
        (r * (2.0 * std::f64::consts::PI * u2).cos()) as f32
    }

    /// Uniform integer in [0, bound) by rejection.
    pub fn below(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0 && bound <= u32::MAX as usize);
        let bound = bound as u32;
        let zone = u32::MAX - (u32::MAX % bound);
        loop {
            let v = self.next_u32();
            if v < zone {
                return (v % bound) as usize;
            }
        }
    }

    /// Deterministic Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_context_same_stream() {
        let mut a = Stream::derive(7, "x");
        let mut b = Stream::derive(7, "x");
        for _ in 0..100 {
            assert_eq!(a.next_u32(), b.next_u32());
        }
    }

    #[test]
    fn different_context_different_stream() {
        let mut a = Stream::derive(7, "x");
        let mut b = Stream::derive(7, "y");
        let same = (0..32).filter(|_| a.next_u32() == b.next_u32()).count();
        assert!(same < 4);
    }

    #[test]
    fn uniform01_in_range() {
        let mut s = Stream::derive(0, "u");
        for _ in 0..10_000 {
            let v = s.uniform01();
            assert!((0.0..1.0).contains(&v));
        }
    }

    #[test]
    fn normal_moments_sane() {
        let mut s = Stream::derive(3, "n");
        let n = 20_000;
        let mut sum = 0.0f64;
        let mut sq = 0.0f64;
        for _ in 0..n {
            let v = s.normal() as f64;
            sum += v;
            sq += v * v;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn below_is_unbiased_enough() {
        let mut s = Stream::derive(1, "b");
        let mut counts = [0usize; 7];
        for _ in 0..7000 {
            counts[s.below(7)] += 1;
        }
        for &c in &counts {
            assert!((800..1200).contains(&c), "count {c}");
        }
    }
}
