//! Deterministic pseudo-random number generation.
//!
//! Every stochastic step in this crate (weight init, dropout masks, data
//! shuffling, synthetic data) draws from [`Rng`], a SplitMix64 generator.
//! SplitMix64 is a counter-based 64-bit mixer (Steele, Lea & Flood's
//! `splitmix64`): the state advances by a fixed odd constant and the output
//! is a bijective scramble of the state, so every seed yields a full-period,
//! well-distributed stream. It is implemented here rather than pulled from a
//! crate so the stream is pinned by this repository: the same seed produces
//! the same bits on every platform and every build of this code, which the
//! reproducibility tests rely on.
//!
//! Gaussian variates come from the Box–Muller transform applied to pairs of
//! uniform draws, with the second variate of each pair cached.

/// Seeded deterministic generator. Cheap to construct; not thread-safe by
/// design — clone or re-seed per thread instead of sharing.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
    /// Second Box–Muller variate kept for the next `next_gaussian` call.
    spare_gaussian: Option<f64>,
}

impl Rng {
    pub fn seed_from(seed: u64) -> Self {
        Rng { state: seed, spare_gaussian: None }
    }

    /// Next 64 raw bits (SplitMix64 step).
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, bound)`. `bound` must be nonzero.
    pub fn next_below(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0, "next_below needs a nonzero bound");
        // Desk-scale bounds are tiny compared to 2^53, so the modulo bias of
        // scaling a 53-bit uniform is far below anything observable here.
        (self.next_f64() * bound as f64) as usize
    }

    /// Standard normal variate via Box–Muller.
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare_gaussian.take() {
            return z;
        }
        // u1 in (0, 1] so the log is finite; u2 in [0, 1).
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare_gaussian = Some(radius * angle.sin());
        radius * angle.cos()
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }
}
