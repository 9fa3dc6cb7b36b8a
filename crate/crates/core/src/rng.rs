//! Counter-based random streams.
//!
//! Every random quantity in the crate is addressed by a key
//! `(seed, domain, stream)` plus a position inside that stream. The
//! generator is ChaCha8: the key words form the cipher key, the last stream
//! word is the ChaCha nonce, and the block counter is the position. Any edge
//! of any environment, or any trajectory of any Monte Carlo run, can thus be
//! regenerated in isolation and in any order.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Separates the independent uses of one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Environment = 1,
    Walk = 2,
    ChiPath = 3,
    Normal = 4,
    Seeds = 5,
}

/// A reproducible random stream.
#[derive(Debug, Clone)]
pub struct StreamRng {
    inner: ChaCha8Rng,
}

impl StreamRng {
    pub fn new(seed: u64, domain: Domain, stream: [u64; 2]) -> Self {
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&(domain as u64).to_le_bytes());
        key[16..24].copy_from_slice(&stream[0].to_le_bytes());
        key[24..32].copy_from_slice(b"rcc-v001");
        let mut inner = ChaCha8Rng::from_seed(key);
        inner.set_stream(stream[1]);
        Self { inner }
    }

    /// Jumps to the `index`-th 64-bit output of the stream.
    pub fn seek_u64(&mut self, index: u64) {
        self.inner.set_word_pos(2 * index as u128);
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `(0, 1]`, safe to feed into a logarithm.
    #[inline]
    pub fn uniform_open0(&mut self) -> f64 {
        ((self.inner.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Exponential variate with the given rate, by inversion.
    #[inline]
    pub fn exponential(&mut self, rate: f64) -> f64 {
        -self.uniform_open0().ln() / rate
    }
}

impl RngCore for StreamRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the `index`-th child of `master` (e.g. the k-th environment of a
/// Monte Carlo run).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut rng = StreamRng::new(master, Domain::Seeds, [0, 0]);
    rng.seek_u64(index);
    rng.next_u64()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seek_matches_sequential() {
        let mut a = StreamRng::new(9, Domain::Environment, [3, 4]);
        let seq: Vec<u64> = (0..40).map(|_| a.next_u64()).collect();
        for (i, &v) in seq.iter().enumerate().rev() {
            let mut b = StreamRng::new(9, Domain::Environment, [3, 4]);
            b.seek_u64(i as u64);
            assert_eq!(b.next_u64(), v);
        }
    }

    #[test]
    fn streams_and_domains_differ() {
        let x = StreamRng::new(1, Domain::Walk, [0, 0]).next_u64();
        assert_ne!(x, StreamRng::new(1, Domain::Walk, [0, 1]).next_u64());
        assert_ne!(x, StreamRng::new(1, Domain::Walk, [1, 0]).next_u64());
        assert_ne!(x, StreamRng::new(1, Domain::Environment, [0, 0]).next_u64());
        assert_ne!(x, StreamRng::new(2, Domain::Walk, [0, 0]).next_u64());
    }

    #[test]
    fn uniforms_in_range() {
        let mut r = StreamRng::new(5, Domain::Walk, [0, 0]);
        for _ in 0..100_000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
            let v = r.uniform_open0();
            assert!(v > 0.0 && v <= 1.0);
        }
    }

    #[test]
    fn exponential_mean() {
        let mut r = StreamRng::new(11, Domain::Walk, [0, 0]);
        let n = 200_000;
        let rate = 2.5;
        let mean = (0..n).map(|_| r.exponential(rate)).sum::<f64>() / n as f64;
        // sd of the mean is 1/(rate sqrt n)
        assert!((mean - 1.0 / rate).abs() < 4.0 / (rate * (n as f64).sqrt()));
    }
}
