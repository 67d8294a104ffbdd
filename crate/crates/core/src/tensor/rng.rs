use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{GladError, Result};

/// Mix a base seed with a stream name into an independent 64-bit seed.
///
/// FNV-1a over the name followed by a splitmix64 finalizer; stable across
/// platforms and releases.
pub fn stream_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix(seed ^ splitmix(h))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seedable counter-based generator (ChaCha8). Draw sequences depend only on
/// the seed, never on the platform.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent generator for a named sub-stream of `seed`.
    pub fn named(seed: u64, name: &str) -> Self {
        Self::new(stream_seed(seed, name))
    }

    /// Generator for `(seed, index)` pairs such as `(seed, worker_id)` or
    /// `(seed, step)`.
    pub fn indexed(seed: u64, name: &str, index: u64) -> Self {
        Self::new(splitmix(stream_seed(seed, name) ^ splitmix(index)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        // 53 random mantissa bits
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.gen_range(0..n as u64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn choose<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.below(items.len())]
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Serialized generator position: `seedhex:stream:word_pos`.
    pub fn state(&self) -> String {
        let seed: String = self.inner.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        format!("{seed}:{}:{}", self.inner.get_stream(), self.inner.get_word_pos())
    }

    pub fn from_state(state: &str) -> Result<Self> {
        let bad = || GladError::Config(format!("malformed rng state {state:?}"));
        let mut parts = state.split(':');
        let seed_hex = parts.next().ok_or_else(bad)?;
        let stream: u64 = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let pos: u128 = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if seed_hex.len() != 64 || parts.next().is_some() {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut inner = ChaCha8Rng::from_seed(seed);
        inner.set_stream(stream);
        inner.set_word_pos(pos);
        Ok(Rng { inner })
    }
}
