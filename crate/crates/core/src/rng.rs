//! Seeded RNG plumbing.
//!
//! Every stochastic component draws from a [`SimRng`] seeded from the
//! episode seed, so a trace is a pure function of (config, seed). Distinct
//! subsystems (noise, humanizer schedules, insertion process) take derived
//! streams to keep their draws independent of one another's call counts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

/// Deterministic generator with a stable stream across platforms.
#[derive(Debug, Clone)]
pub struct SimRng(ChaCha12Rng);

impl SimRng {
    pub fn seed_from(seed: u64) -> Self {
        SimRng(ChaCha12Rng::seed_from_u64(seed))
    }

    /// Derived stream for a named subsystem and index (e.g. one stream per
    /// vehicle for event schedules).
    pub fn substream(seed: u64, domain: u64, index: u64) -> Self {
        // splitmix-style mixing keeps substreams decorrelated
        let mut z = seed
            .wrapping_add(domain.wrapping_mul(0x9E37_79B9_7F4A_7C15))
            .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        SimRng::seed_from(z ^ (z >> 31))
    }

    pub fn normal(&mut self, mean: f64, sigma: f64) -> f64 {
        if sigma == 0.0 {
            return mean;
        }
        Normal::new(mean, sigma).expect("sigma >= 0").sample(&mut self.0)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if lo == hi {
            return lo;
        }
        self.0.gen_range(lo..hi)
    }

    pub fn unit(&mut self) -> f64 {
        self.0.gen::<f64>()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.0.gen::<f64>() < p
    }

    pub fn index(&mut self, len: usize) -> usize {
        debug_assert!(len > 0);
        self.0.gen_range(0..len)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.0.gen_range(0..=i);
            items.swap(i, j);
        }
    }
}
