//! Seeded pseudo-random number generation.
//!
//! Every source of randomness in the crate (model weights, workload traces,
//! sampling streams) flows through [`SplitMix64`], a 64-bit generator with a
//! single additive constant and two xorshift-multiply rounds per output. The
//! algorithm is small enough to re-implement bit-for-bit in any language,
//! which keeps weights and traces reproducible outside this codebase. The
//! exact update rule is documented in the README.

/// SplitMix64 generator state.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Next 64-bit output.
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform double in `[0, 1)`, built from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
        (self.next_u64() >> 11) as f64 * SCALE
    }

    /// Uniform double in `[-1, 1)`.
    pub fn next_symmetric(&mut self) -> f64 {
        2.0 * self.next_f64() - 1.0
    }

    /// Uniform integer in `[0, bound)`. `bound` must be nonzero.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        debug_assert!(bound > 0);
        // Desk-scale bounds are tiny relative to 2^64; modulo bias is
        // far below anything the statistical tests can see.
        self.next_u64() % bound
    }

    /// Exponential draw with the given rate, via inverse CDF.
    pub fn next_exponential(&mut self, rate: f64) -> f64 {
        debug_assert!(rate > 0.0);
        -(1.0 - self.next_f64()).ln() / rate
    }

    /// Standard normal draw via Box-Muller (cosine branch).
    pub fn next_normal(&mut self) -> f64 {
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}
