//! Counter-based SplitMix64 generator with Box–Muller Gaussians.
//!
//! The whole state is one `u64`, advanced by a fixed odd increment and
//! hashed on output, so streams are identical on every platform and the
//! state can be checkpointed as a single integer.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiffusionRng {
    state: u64,
}

impl DiffusionRng {
    pub fn new(seed: u64) -> Self {
        DiffusionRng { state: mix(seed) }
    }

    /// Independent stream for `(seed, stream)`, e.g. one per fold or per epoch.
    pub fn derive(seed: u64, stream: u64) -> Self {
        DiffusionRng {
            state: mix(mix(seed) ^ mix(stream.wrapping_add(GAMMA))),
        }
    }

    pub fn from_state(state: u64) -> Self {
        DiffusionRng { state }
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        mix(self.state)
    }

    /// Uniform on `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n` (rejection sampling, no modulo bias).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "empty range");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Standard normal via Box–Muller (cosine branch only).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Fisher–Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i as u64 + 1) as usize;
            idx.swap(i, j);
        }
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_seed_fixed_stream() {
        let mut a = DiffusionRng::new(42);
        let mut b = DiffusionRng::new(42);
        let xs: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
        assert_ne!(DiffusionRng::new(43).next_u64(), xs[0]);
    }

    #[test]
    fn reference_values_are_pinned() {
        // SplitMix64 with seed pre-mixing; pinned so platform drift is caught.
        let mut r = DiffusionRng::from_state(0);
        assert_eq!(r.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(r.next_u64(), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn state_roundtrip_resumes_stream() {
        let mut a = DiffusionRng::new(7);
        a.normal();
        let mut b = DiffusionRng::from_state(a.state());
        assert_eq!(a.normal().to_bits(), b.normal().to_bits());
    }

    #[test]
    fn normal_moments() {
        let mut r = DiffusionRng::new(1);
        let n = 100_000;
        let xs = r.normal_vec(n);
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let se = (1.0 / n as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean}");
        // var of sample variance for a Gaussian is 2/n
        assert!((var - 1.0).abs() < 3.0 * (2.0 / n as f64).sqrt(), "var {var}");
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut r = DiffusionRng::new(9);
        let mut p = r.permutation(50);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn derived_streams_differ() {
        let a = DiffusionRng::derive(5, 0).next_u64();
        let b = DiffusionRng::derive(5, 1).next_u64();
        assert_ne!(a, b);
    }
}
