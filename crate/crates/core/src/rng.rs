//! Deterministic random streams.
//!
//! Every stochastic routine in this crate draws from a [`StreamRng`]: a
//! ChaCha8 generator keyed from a 64-bit seed and positioned on a 64-bit
//! stream id. Instance generation derives one stream per instance from
//! `(global seed, instance index)`, so datasets are reproducible file by
//! file and independent of generation order or worker count.
//!
//! The exact construction is pinned down so that other implementations can
//! reproduce the byte-identical draws:
//!
//! * key: four 64-bit words produced by iterating SplitMix64 from the seed,
//!   serialized little-endian into the 32-byte ChaCha key;
//! * stream: the ChaCha8 stream counter (`set_stream`);
//! * `u64` draws: consecutive `next_u64` outputs of ChaCha8;
//! * `f64` in `[0,1)`: the top 53 bits of a `u64` draw times 2^-53;
//! * integers in `[0,n)`: Lemire's widening multiply with rejection, so the
//!   result is exactly uniform;
//! * `U(lo,hi)`: `lo + f64 * (hi - lo)`.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent seed from a root seed and a tag path (stage,
/// epoch, batch, ...). SplitMix64 over the concatenated words.
pub fn derive_seed(root: u64, tags: &[u64]) -> u64 {
    let mut state = root;
    let mut out = splitmix64(&mut state);
    for tag in tags {
        state ^= *tag;
        out = splitmix64(&mut state);
    }
    out
}

/// Seedable, splittable deterministic generator (ChaCha8 under the hood).
#[derive(Debug, Clone)]
pub struct StreamRng {
    inner: ChaCha8Rng,
}

impl StreamRng {
    /// Stream `stream` of the family keyed by `seed`.
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut key = [0u8; 32];
        let mut state = seed;
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        let mut inner = ChaCha8Rng::from_seed(key);
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw from `[0, 1)` with 53-bit resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw from `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + self.uniform() * (hi - lo)
    }

    /// Exactly uniform integer from `[0, n)`.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        // Lemire 2019: multiply-shift with rejection of the biased low range.
        let threshold = n.wrapping_neg() % n;
        loop {
            let x = self.next_u64();
            let wide = (x as u128) * (n as u128);
            if (wide as u64) >= threshold {
                return (wide >> 64) as u64;
            }
        }
    }

    /// Exactly uniform integer from the inclusive range `[lo, hi]`.
    pub fn int_in(&mut self, lo: i64, hi: i64) -> i64 {
        debug_assert!(lo <= hi);
        lo + self.below((hi - lo + 1) as u64) as i64
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Index sampled from a cumulative scan of `weights` (need not be
    /// normalized). Used for multinomial action sampling.
    pub fn weighted_index(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut target = self.uniform() * total;
        for (i, w) in weights.iter().enumerate() {
            target -= w;
            if target < 0.0 {
                return i;
            }
        }
        // Rounding pushed the target past the end; take the last positive weight.
        weights
            .iter()
            .rposition(|w| *w > 0.0)
            .expect("weighted_index over all-zero weights")
    }
}
