//! Small numeric kernels shared across the crate.

/// `ln(sum_i exp(x_i))` with the usual max shift.
///
/// Entries equal to `f64::NEG_INFINITY` contribute nothing; an empty or
/// all-`-inf` input yields `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs
        .iter()
        .filter(|x| x.is_finite() || **x == f64::INFINITY)
        .map(|x| (x - max).exp())
        .sum();
    max + sum.ln()
}

/// Neumaier-compensated accumulator.
///
/// Sums of `b^n` mixed-sign terms feed directly into `(b*lambda)^{-n}`
/// rescaling, so plain accumulation would leak cancellation error into
/// every downstream statistic.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KahanSum {
    sum: f64,
    compensation: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    /// Fold another accumulator in. Merge order must be fixed by the
    /// caller for bit-reproducible totals.
    #[inline]
    pub fn merge(&mut self, other: KahanSum) {
        self.add(other.sum);
        self.compensation += other.compensation;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// The SplitMix64 output function on a keyed counter.
///
/// `splitmix64(seed, i)` is the `(i+1)`-th value of the SplitMix64 stream
/// started at `seed`, computable in O(1) for any index.
pub fn splitmix64(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_matches_naive_in_range() {
        let xs = [0.5f64, 2.0, -1.0];
        let naive = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&xs) - naive).abs() < 1e-14);
    }

    #[test]
    fn log_sum_exp_survives_large_arguments() {
        let xs = [1234.0, 1232.0];
        let expected = 1232.0 + (2f64.exp() + 1.0).ln();
        assert!((log_sum_exp(&xs) - expected).abs() < 1e-12);
        assert!(xs.iter().map(|x| x.exp()).sum::<f64>().is_infinite());
    }

    #[test]
    fn log_sum_exp_skips_neg_infinity() {
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, 2.0]), 2.0);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn kahan_recovers_cancellation() {
        let mut acc = KahanSum::new();
        acc.add(1e16);
        for _ in 0..10 {
            acc.add(1.0);
        }
        acc.add(-1e16);
        assert_eq!(acc.value(), 10.0);
    }

    #[test]
    fn kahan_merge_matches_sequential() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64).sin() * 1e8).collect();
        let mut whole = KahanSum::new();
        for &x in &xs {
            whole.add(x);
        }
        let mut left = KahanSum::new();
        let mut right = KahanSum::new();
        for &x in &xs[..500] {
            left.add(x);
        }
        for &x in &xs[500..] {
            right.add(x);
        }
        left.merge(right);
        assert!((left.value() - whole.value()).abs() <= 1e-6 * whole.value().abs());
    }

    #[test]
    fn splitmix_is_a_function_of_seed_and_index() {
        assert_eq!(splitmix64(42, 0), splitmix64(42, 0));
        assert_ne!(splitmix64(42, 0), splitmix64(42, 1));
        assert_ne!(splitmix64(42, 0), splitmix64(43, 0));
    }
}
