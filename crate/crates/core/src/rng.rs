//! Seeded random streams.
//!
//! Every stream is a ChaCha12 generator keyed by the master seed, with the
//! ChaCha stream id derived from a path of counters (for example
//! `[t_index, replica]`). Streams are therefore fixed by `(seed, path)` alone
//! and never depend on worker scheduling.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Human-readable description of the derivation, echoed into run manifests.
pub const DERIVATION: &str = "chacha12(seed=master_seed, stream=splitmix64-fold(path))";

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a counter path into a single 64-bit stream id.
pub fn stream_id(path: &[u64]) -> u64 {
    path.iter()
        .fold(0x5eed_u64, |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

#[derive(Clone, Debug)]
pub struct RngStream {
    inner: ChaCha12Rng,
}

impl RngStream {
    pub fn new(master_seed: u64) -> Self {
        Self::derive(master_seed, &[])
    }

    pub fn derive(master_seed: u64, path: &[u64]) -> Self {
        let mut inner = ChaCha12Rng::seed_from_u64(master_seed);
        inner.set_stream(stream_id(path));
        Self { inner }
    }

    /// Uniform draw in the open interval (0, 1).
    pub fn open01(&mut self) -> f64 {
        loop {
            let u = (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            if u > 0.0 {
                return u;
            }
        }
    }

    /// Standard exponential draw.
    pub fn exp1(&mut self) -> f64 {
        -self.open01().ln()
    }
}

impl RngCore for RngStream {
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
