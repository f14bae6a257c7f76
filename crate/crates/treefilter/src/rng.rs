//! Seedable counter-based random generator.
//!
//! All randomness in the crate flows through [`SplitMix64`] so that every
//! seeded operation is bit-reproducible across runs and platforms. Streams
//! derived via [`mix`] are independent of evaluation order, which lets
//! parallel rounds draw their numbers without coordination.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a seed together with stream tags into a fresh 64-bit state.
///
/// `mix(&[seed, round, vertex])` gives every (round, vertex) pair its own
/// deterministic stream regardless of the order vertices are processed in.
pub fn mix(parts: &[u64]) -> u64 {
    let mut state = 0u64;
    for &p in parts {
        state = finalize(state.wrapping_add(GAMMA).wrapping_add(p));
    }
    finalize(state.wrapping_add(GAMMA))
}

/// SplitMix64 generator.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    /// Derives a generator for an independent stream of the same seed.
    pub fn stream(seed: u64, tags: &[u64]) -> Self {
        SplitMix64 { state: mix(&{
            let mut v = vec![seed];
            v.extend_from_slice(tags);
            v
        }) }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        finalize(self.state)
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn next_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). `n` must be positive.
    pub fn next_index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn next_gaussian(&mut self) -> f64 {
        // next_f64 can return 0, whose log is -inf; shift into (0, 1].
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}
