//! Deep covariance between reconstructed internal states.
//!
//! From `ell` independent leaf samples, the correlation between two
//! internal nodes `u, v` at level `m` is estimated by averaging the product
//! of their linearly reconstructed states,
//! `Cov^[u,v] = (1/ell) sum_i A_i(u) A_i(v)` with
//! `A_i(w) = (b lambda)^{-(n-m)} sum_{x below w} sigma^i_x`,
//! whose expectation is `lambda^d(u,v)`. Inverting that exponential gives a
//! tree-distance estimate.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::numeric::KahanSum;
use crate::sim::{broadcast_dfs, root_rng_and_state, ChannelSampler, LeafSink, RootCondition};
use crate::spectral::SpectralData;

/// Hard cap on `ell * b^n` recorded sigma values.
pub const SAMPLE_BUDGET: u128 = 1 << 32;
/// Rows per parallel work item when generating samples.
const ROW_CHUNK: usize = 128;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhyloError {
    #[error("sample budget exceeded: {needed} sigma values > {budget}")]
    BudgetExceeded { needed: u128, budget: u128 },
    #[error("invalid node pair: {0}")]
    InvalidPair(String),
    #[error("level n={n} exceeds the supported maximum {max}")]
    LevelTooDeep { n: u32, max: u32 },
}

/// `ell` rows of leaf sigma values, one row per independent replica of the
/// broadcast process with a stationary root.
#[derive(Debug, Clone)]
pub struct SampleMatrix {
    ell: usize,
    n: u32,
    b: u32,
    leaves: usize,
    data: Vec<f64>,
}

impl SampleMatrix {
    pub fn ell(&self) -> usize {
        self.ell
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn b(&self) -> u32 {
        self.b
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves
    }

    /// Sigma values of one replica, in left-to-right leaf order.
    pub fn sample(&self, i: usize) -> &[f64] {
        &self.data[i * self.leaves..(i + 1) * self.leaves]
    }

    /// Level-`m` ancestor index of a leaf (level-order within level `m`).
    pub fn ancestor_at_level(&self, leaf: usize, m: u32) -> usize {
        leaf / (self.b as usize).pow(self.n - m)
    }
}

struct Recorder<'a> {
    row: &'a mut [f64],
    next: usize,
}

impl LeafSink for Recorder<'_> {
    #[inline]
    fn leaf(&mut self, _state: usize, sigma: f64) {
        self.row[self.next] = sigma;
        self.next += 1;
    }
}

/// Draw `ell` independent replicas and record every leaf sigma.
pub fn generate_samples(
    sd: &SpectralData,
    n: u32,
    ell: usize,
    master_seed: u64,
) -> Result<SampleMatrix, PhyloError> {
    if n > crate::sim::MAX_LEVEL {
        return Err(PhyloError::LevelTooDeep {
            n,
            max: crate::sim::MAX_LEVEL,
        });
    }
    let leaves_u128 = (sd.b as u128).pow(n);
    let needed = leaves_u128 * ell as u128;
    if needed > SAMPLE_BUDGET {
        return Err(PhyloError::BudgetExceeded {
            needed,
            budget: SAMPLE_BUDGET,
        });
    }
    let leaves = leaves_u128 as usize;
    let sampler = ChannelSampler::new(sd);
    let mut data = vec![0.0f64; ell * leaves];

    let fill_row = |row_index: usize, row: &mut [f64]| {
        let (mut rng, root) = root_rng_and_state(
            &sampler,
            master_seed,
            row_index as u64,
            RootCondition::Stationary,
        );
        let mut rec = Recorder { row, next: 0 };
        broadcast_dfs(&sampler, &mut rng, n, root, &mut rec);
    };

    // Rows are disjoint slices filled purely from their own index, so the
    // split into work items cannot affect the output.
    #[cfg(feature = "parallel")]
    data.par_chunks_mut(leaves * ROW_CHUNK)
        .enumerate()
        .for_each(|(chunk, block)| {
            for (offset, row) in block.chunks_mut(leaves).enumerate() {
                fill_row(chunk * ROW_CHUNK + offset, row);
            }
        });
    #[cfg(not(feature = "parallel"))]
    for (chunk, block) in data.chunks_mut(leaves * ROW_CHUNK).enumerate() {
        for (offset, row) in block.chunks_mut(leaves).enumerate() {
            fill_row(chunk * ROW_CHUNK + offset, row);
        }
    }

    Ok(SampleMatrix {
        ell,
        n,
        b: sd.b,
        leaves,
        data,
    })
}

/// Two distinct internal nodes on the same level, with their tree distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct NodePair {
    /// Level of both nodes.
    pub level: u32,
    /// Level-order index of the first node.
    pub u: usize,
    /// Level-order index of the second node.
    pub v: usize,
    /// Tree distance `2 (level - lca_level)`; always even, at least 2.
    pub distance: u32,
}

impl NodePair {
    pub fn new(level: u32, u: usize, v: usize, b: u32) -> Result<Self, PhyloError> {
        let width = (b as u128).pow(level);
        if u == v {
            return Err(PhyloError::InvalidPair(format!(
                "nodes must be distinct, both are {u}"
            )));
        }
        if (u as u128) >= width || (v as u128) >= width {
            return Err(PhyloError::InvalidPair(format!(
                "indices ({u}, {v}) out of range for level {level} of a {b}-ary tree"
            )));
        }
        // Walk both indices up until they meet; each division by b is one
        // level towards the root.
        let mut a = u;
        let mut c = v;
        let mut steps = 0u32;
        while a != c {
            a /= b as usize;
            c /= b as usize;
            steps += 1;
        }
        Ok(NodePair {
            level,
            u,
            v,
            distance: 2 * steps,
        })
    }
}

/// The deep-covariance estimator between a pair of internal nodes.
pub fn cov_hat(
    samples: &SampleMatrix,
    pair: &NodePair,
    sd: &SpectralData,
) -> Result<f64, PhyloError> {
    if samples.b != sd.b {
        return Err(PhyloError::InvalidPair(format!(
            "sample arity {} does not match channel arity {}",
            samples.b, sd.b
        )));
    }
    if pair.level >= samples.n {
        return Err(PhyloError::InvalidPair(format!(
            "pair level {} must be below the sample level {}",
            pair.level, samples.n
        )));
    }
    let depth = samples.n - pair.level;
    let block = (samples.b as usize).pow(depth);
    let scale = sd.b_lambda().powi(depth as i32).recip();

    let mut total = KahanSum::new();
    for i in 0..samples.ell {
        let row = samples.sample(i);
        let mut su = KahanSum::new();
        for &x in &row[pair.u * block..(pair.u + 1) * block] {
            su.add(x);
        }
        let mut sv = KahanSum::new();
        for &x in &row[pair.v * block..(pair.v + 1) * block] {
            sv.add(x);
        }
        total.add((scale * su.value()) * (scale * sv.value()));
    }
    Ok(total.value() / samples.ell as f64)
}

/// Inversion of `E[cov] = lambda^d` back to a distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", content = "value")]
pub enum DistanceEstimate {
    Distance(f64),
    /// The covariance was non-positive (noise-dominated) or `|lambda| = 1`
    /// makes the inversion ill-posed.
    Undefined,
}

pub fn distance_estimate(cov: f64, sd: &SpectralData) -> DistanceEstimate {
    if !(cov > 0.0) || !cov.is_finite() {
        return DistanceEstimate::Undefined;
    }
    // Same-level pairs sit at even distance, so the expectation lambda^d is
    // positive for either sign of lambda and |lambda| carries the decay.
    let log_abs_lambda = sd.lambda.abs().ln();
    if log_abs_lambda == 0.0 {
        return DistanceEstimate::Undefined;
    }
    DistanceEstimate::Distance(cov.ln() / log_abs_lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_seed;
    use crate::spectral::{analyze, binary_symmetric_channel};
    use approx::assert_abs_diff_eq;

    fn bsc(p: f64) -> SpectralData {
        analyze(&binary_symmetric_channel(p).unwrap(), 2).unwrap()
    }

    #[test]
    fn node_pair_distances_from_digits() {
        // Binary tree, level 2: nodes 0..4. Siblings (0,1) have d=2; the
        // cross pair (0,2) meets at the root, d=4.
        let s = NodePair::new(2, 0, 1, 2).unwrap();
        assert_eq!(s.distance, 2);
        let x = NodePair::new(2, 0, 2, 2).unwrap();
        assert_eq!(x.distance, 4);
        let y = NodePair::new(3, 1, 5, 2).unwrap();
        assert_eq!(y.distance, 6);
    }

    #[test]
    fn node_pair_rejects_bad_input() {
        assert!(NodePair::new(2, 1, 1, 2).is_err());
        assert!(NodePair::new(2, 0, 4, 2).is_err());
        assert!(NodePair::new(0, 0, 0, 2).is_err());
    }

    #[test]
    fn sample_matrix_shape_and_ancestors() {
        let sd = bsc(0.1);
        let m = generate_samples(&sd, 3, 5, 17).unwrap();
        assert_eq!(m.ell(), 5);
        assert_eq!(m.leaf_count(), 8);
        assert_eq!(m.sample(4).len(), 8);
        assert_eq!(m.ancestor_at_level(5, 1), 1);
        assert_eq!(m.ancestor_at_level(5, 2), 2);
        // Every sigma is one of the two spin values.
        for i in 0..5 {
            for &x in m.sample(i) {
                assert!((x - 1.0).abs() < 1e-12 || (x + 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let sd = bsc(0.1);
        let a = generate_samples(&sd, 4, 300, 19).unwrap();
        let b = generate_samples(&sd, 4, 300, 19).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn budget_guard_trips() {
        let sd = bsc(0.1);
        assert!(matches!(
            generate_samples(&sd, 24, 1 << 12, 0).unwrap_err(),
            PhyloError::BudgetExceeded { .. }
        ));
    }

    #[test]
    fn column_means_are_near_zero() {
        // E[sigma] = sum pi_i nu_i = 0 under the stationary root.
        let sd = bsc(0.1);
        let m = generate_samples(&sd, 2, 10_000, 23).unwrap();
        for leaf in 0..m.leaf_count() {
            let mean: f64 =
                (0..m.ell()).map(|i| m.sample(i)[leaf]).sum::<f64>() / m.ell() as f64;
            // sigma is +-1 so the SE of the column mean is 1/sqrt(ell).
            assert!(mean.abs() <= 4.0 / (m.ell() as f64).sqrt(), "leaf {leaf}: {mean}");
        }
    }

    #[test]
    fn cov_hat_is_symmetric() {
        let sd = bsc(0.1);
        let m = generate_samples(&sd, 4, 500, 29).unwrap();
        let uv = NodePair::new(1, 0, 1, 2).unwrap();
        let vu = NodePair::new(1, 1, 0, 2).unwrap();
        assert_eq!(
            cov_hat(&m, &uv, &sd).unwrap(),
            cov_hat(&m, &vu, &sd).unwrap()
        );
    }

    #[test]
    fn cov_hat_sibling_expectation() {
        // E[cov_hat] = lambda^2 = 0.64 for siblings at m=1.
        let sd = bsc(0.1);
        let pair = NodePair::new(1, 0, 1, 2).unwrap();
        let repeats = 40;
        let mut values = Vec::new();
        for r in 0..repeats {
            let m = generate_samples(&sd, 4, 2000, derive_seed(31, r)).unwrap();
            values.push(cov_hat(&m, &pair, &sd).unwrap());
        }
        let mean: f64 = values.iter().sum::<f64>() / repeats as f64;
        let var: f64 =
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (repeats - 1) as f64;
        let se = (var / repeats as f64).sqrt();
        assert!(
            (mean - 0.64).abs() <= 4.0 * se,
            "mean {mean} se {se} target 0.64"
        );
    }

    #[test]
    fn concentration_improves_with_more_samples() {
        let sd = bsc(0.1);
        let pair = NodePair::new(1, 0, 1, 2).unwrap();
        let spread = |ell: usize| {
            let repeats = 30;
            let values: Vec<f64> = (0..repeats)
                .map(|r| {
                    let m = generate_samples(&sd, 4, ell, derive_seed(37, r as u64)).unwrap();
                    cov_hat(&m, &pair, &sd).unwrap()
                })
                .collect();
            let mean: f64 = values.iter().sum::<f64>() / values.len() as f64;
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (values.len() - 1) as f64
        };
        assert!(spread(4000) < spread(1000));
    }

    #[test]
    fn single_sample_cov_is_the_plain_product() {
        let sd = bsc(0.1);
        let m = generate_samples(&sd, 3, 1, 41).unwrap();
        let pair = NodePair::new(1, 0, 1, 2).unwrap();
        let c = cov_hat(&m, &pair, &sd).unwrap();
        assert!(c.is_finite());
        let row = m.sample(0);
        let scale = sd.b_lambda().powi(2).recip();
        let a: f64 = row[0..4].iter().sum::<f64>() * scale;
        let b: f64 = row[4..8].iter().sum::<f64>() * scale;
        assert_abs_diff_eq!(c, a * b, epsilon = 1e-12);
    }

    #[test]
    fn distance_inversion_identities() {
        let sd = bsc(0.1);
        match distance_estimate(0.64, &sd) {
            DistanceEstimate::Distance(d) => assert_abs_diff_eq!(d, 2.0, epsilon = 1e-9),
            DistanceEstimate::Undefined => panic!("expected a distance"),
        }
        match distance_estimate(0.4096, &sd) {
            DistanceEstimate::Distance(d) => assert_abs_diff_eq!(d, 4.0, epsilon = 1e-9),
            DistanceEstimate::Undefined => panic!("expected a distance"),
        }
        assert_eq!(distance_estimate(-0.01, &sd), DistanceEstimate::Undefined);
        assert_eq!(distance_estimate(0.0, &sd), DistanceEstimate::Undefined);
    }

    #[test]
    fn cov_hat_rejects_pair_at_or_above_sample_level() {
        let sd = bsc(0.1);
        let m = generate_samples(&sd, 2, 10, 43).unwrap();
        let pair = NodePair::new(2, 0, 1, 2).unwrap();
        assert!(matches!(
            cov_hat(&m, &pair, &sd).unwrap_err(),
            PhyloError::InvalidPair(_)
        ));
    }
}
