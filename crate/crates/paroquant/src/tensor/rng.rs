//! Deterministic PRNG: SplitMix64 seeding a xoshiro256** core.
//!
//! Both generators follow their public reference algorithms, so any
//! implementation in any language reproduces identical streams (and therefore
//! identical shuffles and synthetic data) from the same seed. Single-owner:
//! the state is not shareable across threads.

/// xoshiro256** seeded via SplitMix64.
#[derive(Debug, Clone)]
pub struct Rng {
    state: [u64; 4],
    /// Cached second Box–Muller output.
    spare_normal: Option<f64>,
}

#[inline]
fn splitmix64(x: &mut u64) -> u64 {
    *x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut x = seed;
        let state = [
            splitmix64(&mut x),
            splitmix64(&mut x),
            splitmix64(&mut x),
            splitmix64(&mut x),
        ];
        Self { state, spare_normal: None }
    }

    /// Derive an independent child seed; used for per-epoch shuffles and
    /// validation-set offsets.
    pub fn derive_seed(base: u64, tag: u64) -> u64 {
        let mut x = base ^ tag.wrapping_mul(0x9E3779B97F4A7C15);
        splitmix64(&mut x)
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box–Muller.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(v) = self.spare_normal.take() {
            return v;
        }
        // Reject u1 == 0 so the log stays finite.
        let mut u1 = self.next_f64();
        while u1 <= 0.0 {
            u1 = self.next_f64();
        }
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // First eight outputs for seeds 0 and 42, frozen once from an
    // independently written implementation of the reference algorithms.
    #[test]
    fn reference_stream_seed_0() {
        let mut rng = Rng::new(0);
        let expected = [
            0x99ec5f36cb75f2b4u64,
            0xbf6e1f784956452a,
            0x1a5f849d4933e6e0,
            0x6aa594f1262d2d2c,
            0xbba5ad4a1f842e59,
            0xffef8375d9ebcaca,
            0x6c160deed2f54c98,
            0x8920ad648fc30a3f,
        ];
        for e in expected {
            assert_eq!(rng.next_u64(), e);
        }
    }

    #[test]
    fn reference_stream_seed_42() {
        let mut rng = Rng::new(42);
        let expected = [
            0x15780b2e0c2ec716u64,
            0x6104d9866d113a7e,
            0xae17533239e499a1,
            0xecb8ad4703b360a1,
            0xfde6dc7fe2ec5e64,
            0xc50da53101795238,
            0xb82154855a65ddb2,
            0xd99a2743ebe60087,
        ];
        for e in expected {
            assert_eq!(rng.next_u64(), e);
        }
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut rng = Rng::new(9);
        for _ in 0..1000 {
            let v = rng.next_f64();
            assert!((0.0..1.0).contains(&v));
        }
    }

    #[test]
    fn normal_moments_roughly_standard() {
        let mut rng = Rng::new(5);
        let n = 20_000;
        let samples: Vec<f64> = (0..n).map(|_| rng.next_normal()).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "var {var}");
    }

    #[test]
    fn derive_seed_changes_with_tag() {
        assert_ne!(Rng::derive_seed(1, 2), Rng::derive_seed(1, 3));
        assert_eq!(Rng::derive_seed(1, 2), Rng::derive_seed(1, 2));
    }
}
