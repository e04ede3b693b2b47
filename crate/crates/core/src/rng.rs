//! Counter-based splittable random streams.
//!
//! Every random decision in this crate is drawn from an [`RngStream`] that is
//! fully determined by a root seed and a path of derivation labels
//! (experiment, candidate index, replication index, turn index, ...).
//! Work items derive their own streams up front, so results do not depend on
//! the order in which a thread pool happens to execute them.

/// Weyl increment and finalizer constants from the splitmix64 generator.
const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const LABEL_SALT: u64 = 0xD1B5_4A32_D192_ED03;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A deterministic random stream identified by (root seed, derivation path).
///
/// The stream is counter-based: draw `i` is a pure function of the folded
/// key and `i`, and `derive` folds one more label into the key. Streams are
/// plain values; clone them freely and move them across threads.
#[derive(Clone, Debug)]
pub struct RngStream {
    key: u64,
    counter: u64,
    spare_gauss: Option<f64>,
}

impl RngStream {
    /// Stream at the root of the derivation tree for `root_seed`.
    pub fn root(root_seed: u64) -> Self {
        RngStream {
            key: mix64(root_seed ^ GOLDEN),
            counter: 0,
            spare_gauss: None,
        }
    }

    /// Child stream for `label`. Children with distinct labels, and children
    /// reached by the same labels in different orders, are independent.
    pub fn derive(&self, label: u64) -> Self {
        RngStream {
            key: mix64(self.key ^ mix64(label ^ LABEL_SALT)),
            counter: 0,
            spare_gauss: None,
        }
    }

    /// Convenience for deriving through several labels at once.
    pub fn derive_path(&self, labels: &[u64]) -> Self {
        let mut s = self.clone();
        for &l in labels {
            s = s.derive(l);
        }
        s
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform draw in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in (0, 1]; safe as a logarithm argument.
    fn uniform_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Multiply-shift bounded draw; bias is < 2^-53 for any practical n.
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal draw (Box-Muller, second value cached).
    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare_gauss.take() {
            return z;
        }
        let r = (-2.0 * self.uniform_open().ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * self.uniform();
        let (s, c) = theta.sin_cos();
        self.spare_gauss = Some(r * s);
        r * c
    }

    /// Standard Gumbel draw, for stochastic top-k masks.
    pub fn gumbel(&mut self) -> f64 {
        -(-self.uniform_open().ln()).ln()
    }
}

/// `n` iid standard-normal draws.
pub fn gaussian_vec(rng: &mut RngStream, n: usize) -> Result<Vec<f64>, crate::stats::NumError> {
    if n == 0 {
        return Err(crate::stats::NumError::EmptyVector);
    }
    Ok((0..n).map(|_| rng.gaussian()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_seed_and_path_replays_identically() {
        let mut a = RngStream::root(7).derive(0);
        let mut b = RngStream::root(7).derive(0);
        for _ in 0..10 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn distinct_labels_diverge() {
        let mut a = RngStream::root(7).derive(0);
        let mut b = RngStream::root(7).derive(1);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn path_order_matters() {
        let mut a = RngStream::root(7).derive_path(&[0, 1]);
        let mut b = RngStream::root(7).derive_path(&[1, 0]);
        let sa: Vec<u64> = (0..4).map(|_| a.next_u64()).collect();
        let sb: Vec<u64> = (0..4).map(|_| b.next_u64()).collect();
        assert_ne!(sa, sb);
    }

    #[test]
    fn sibling_streams_are_uncorrelated() {
        let mut a = RngStream::root(99).derive(1);
        let mut b = RngStream::root(99).derive(2);
        let n = 10_000;
        let (mut sa, mut sb, mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let x = a.uniform() - 0.5;
            let y = b.uniform() - 0.5;
            sa += x;
            sb += y;
            sab += x * y;
            saa += x * x;
            sbb += y * y;
        }
        let nf = n as f64;
        let cov = sab / nf - (sa / nf) * (sb / nf);
        let r = cov / ((saa / nf - (sa / nf).powi(2)).sqrt() * (sbb / nf - (sb / nf).powi(2)).sqrt());
        assert!(r.abs() < 0.05, "sibling correlation too high: {r}");
    }

    #[test]
    fn gaussian_vec_moments() {
        let mut rng = RngStream::root(3).derive(11);
        let v = gaussian_vec(&mut rng, 1_000_000).unwrap();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (v.len() - 1) as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "variance {var}");
    }

    #[test]
    fn gaussian_vec_rejects_empty() {
        let mut rng = RngStream::root(3);
        assert!(gaussian_vec(&mut rng, 0).is_err());
    }

    #[test]
    fn uniform_is_in_unit_interval() {
        let mut rng = RngStream::root(17).derive(5);
        for _ in 0..10_000 {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn below_covers_range_uniformly() {
        let mut rng = RngStream::root(21);
        let mut counts = [0usize; 5];
        for _ in 0..50_000 {
            counts[rng.below(5)] += 1;
        }
        for &c in &counts {
            assert!((c as f64 / 50_000.0 - 0.2).abs() < 0.02, "counts {counts:?}");
        }
    }

    /// Kolmogorov-Smirnov test of `gaussian()` against N(0,1) at alpha = 0.01.
    #[test]
    fn gaussian_passes_ks_test() {
        fn phi(x: f64) -> f64 {
            // Abramowitz-Stegun 7.1.26 erf approximation, |error| < 1.5e-7.
            let z = x / std::f64::consts::SQRT_2;
            let t = 1.0 / (1.0 + 0.3275911 * z.abs());
            let poly = t
                * (0.254829592
                    + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
            let erf = 1.0 - poly * (-z * z).exp();
            0.5 * (1.0 + if x < 0.0 { -erf } else { erf })
        }
        let n = 100_000usize;
        let mut rng = RngStream::root(1234).derive(8);
        let mut xs: Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut d: f64 = 0.0;
        for (i, &x) in xs.iter().enumerate() {
            let f = phi(x);
            let lo = i as f64 / n as f64;
            let hi = (i + 1) as f64 / n as f64;
            d = d.max((f - lo).abs()).max((hi - f).abs());
        }
        let critical = 1.628 / (n as f64).sqrt(); // alpha = 0.01
        assert!(d < critical, "KS statistic {d} >= {critical}");
    }
}
