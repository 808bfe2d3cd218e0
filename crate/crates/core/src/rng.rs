//! Seeded, splittable randomness.
//!
//! Every stochastic step in the pipeline draws from an [`Rng`] seeded by a
//! 64-bit value. ChaCha8 gives identical streams on every platform, so any
//! artifact produced under a fixed seed is byte-for-byte reproducible.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// Deterministic random stream. Cloning snapshots the stream state.
#[derive(Debug, Clone)]
pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn seed_from(seed: u64) -> Self {
        Rng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Forks an independent child stream, advancing self by one draw.
    pub fn split(&mut self) -> Rng {
        Rng(ChaCha8Rng::seed_from_u64(self.0.gen()))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.gen()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.0.gen::<f64>()
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        if lo == hi {
            return lo;
        }
        Uniform::new(lo, hi).sample(&mut self.0)
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        Normal::new(0.0, 1.0).unwrap().sample(&mut self.0)
    }

    pub fn gen_range(&mut self, n: usize) -> usize {
        self.0.gen_range(0..n)
    }

    pub fn gen_bool(&mut self, p: f64) -> bool {
        self.0.gen_bool(p)
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.0.gen_range(0..=i);
            xs.swap(i, j);
        }
    }

    /// Snapshot of the stream state, restorable with [`Rng::restore`].
    pub fn state(&self) -> RngState {
        RngState {
            seed: self.0.get_seed(),
            stream: self.0.get_stream(),
            word_pos: self.0.get_word_pos(),
        }
    }

    pub fn restore(state: &RngState) -> Self {
        let mut inner = ChaCha8Rng::from_seed(state.seed);
        inner.set_stream(state.stream);
        inner.set_word_pos(state.word_pos);
        Rng(inner)
    }
}

/// Serializable ChaCha stream position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

/// Stable 64-bit mix of a global seed and a textual identity (FNV-1a).
///
/// Used to derive per-sample seeds from a run seed so that samples are
/// reproducible independent of generation order or worker count.
pub fn derive_seed(global: u64, id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in global.to_le_bytes().iter().chain(id.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::seed_from(7);
        let mut b = Rng::seed_from(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn split_streams_diverge() {
        let mut root = Rng::seed_from(7);
        let mut a = root.split();
        let mut b = root.split();
        let xs: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn state_roundtrip_resumes_exactly() {
        let mut a = Rng::seed_from(42);
        for _ in 0..13 {
            a.next_u64();
        }
        let snap = a.state();
        let mut b = Rng::restore(&snap);
        for _ in 0..50 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn derive_seed_is_stable() {
        // Frozen value: changing the mix silently would break every manifest.
        assert_eq!(derive_seed(0, "m3_00000"), 0x2fd8_afe0_5704_97ce);
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
    }
}
