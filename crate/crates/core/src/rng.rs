//! Seeded pseudo-random number generation.
//!
//! Every source of randomness in this crate flows through [`SplitMix64`] so
//! that runs are reproducible across platforms and languages. The generator,
//! the uniform mapping, and the normal sampler are all pinned by algorithm;
//! nothing depends on a platform default.

/// SplitMix64 generator (Steele, Lea, Flood 2014).
///
/// State advances by the golden-ratio increment; output is the finalized
/// mix of the new state.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Derive an independent stream for a sub-task. The stream index is
    /// folded into the state through one finalization round so nearby
    /// indices do not produce correlated streams.
    pub fn derive(&self, stream: u64) -> Self {
        let mut r = Self::new(self.state ^ mix(stream.wrapping_add(0x9e37_79b9_7f4a_7c15)));
        // burn one output to decouple from the parent state
        r.next_u64();
        r
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        mix(self.state)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). Modulo mapping; the bias is negligible for
    /// the small ranges used here and the mapping is trivially portable.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller (one value per pair of uniforms; the
    /// second value is discarded to keep the state sequence simple).
    pub fn next_normal(&mut self) -> f64 {
        loop {
            let u1 = self.next_f64();
            let u2 = self.next_f64();
            if u1 > 0.0 {
                return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            }
        }
    }

    /// Sample `k` distinct indices from [0, n) by partial Fisher-Yates.
    /// Returned in ascending order.
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "sample_distinct: k > n");
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        let mut out = idx[..k].to_vec();
        out.sort_unstable();
        out
    }

    /// Shuffle a slice in place (Fisher-Yates).
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
