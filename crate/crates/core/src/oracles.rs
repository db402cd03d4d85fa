//! Deterministic ground truth for the linear root estimator.
//!
//! Four independent routes to the conditional law of `S_n`:
//! the one-level log-MGF recursion, the mean/second-moment recursions,
//! exhaustive enumeration of tiny trees, and Gauss-Hermite quadrature for
//! the MGF of `S_n^2`. The Monte Carlo engine in [`crate::sim`] is checked
//! against all of them.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::numeric::log_sum_exp;
use crate::quadrature::GaussHermite;
use crate::spectral::SpectralData;

/// Enumeration budget for [`brute_force`]: `k^(node count)` assignments.
pub const BRUTE_FORCE_BUDGET: u128 = 1 << 24;
/// Deepest level the brute-force oracle accepts.
pub const BRUTE_FORCE_MAX_LEVEL: u32 = 3;
/// Node-doubling relative tolerance for quadrature convergence.
pub const QUADRATURE_REL_TOL: f64 = 1e-6;
/// Smallest admissible Gauss-Hermite rule.
pub const MIN_QUADRATURE_NODES: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("lambda is numerically zero; the recursion divides by b*lambda")]
    ZeroLambda,
    #[error("enumeration budget exceeded: {needed} assignments > {budget}")]
    BudgetExceeded { needed: u128, budget: u128 },
    #[error("brute force supports levels up to {max}, got n={n}")]
    LevelTooDeep { n: u32, max: u32 },
    #[error("zeta must be non-negative for the square-MGF, got {0}")]
    NegativeZeta(f64),
    #[error("zeta grid contains a non-finite value {0}")]
    NonFiniteZeta(f64),
    #[error("quadrature needs at least {MIN_QUADRATURE_NODES} nodes, got {0}")]
    TooFewNodes(usize),
}

fn check_lambda(sd: &SpectralData) -> Result<(), OracleError> {
    if sd.lambda.abs() < 1e-12 {
        Err(OracleError::ZeroLambda)
    } else {
        Ok(())
    }
}

/// `gamma_n^i(zeta) = ln E[e^{zeta S_n} | root state i]` for every `i`.
///
/// Each level relates the MGF at `zeta` to the previous level at
/// `zeta/(b*lambda)`, so the value at `(n, zeta)` is rebuilt from level 0
/// at the pulled-back argument `zeta/(b*lambda)^n` and rolled forward in
/// log space. Cost O(n k^2) per call; nothing is interpolated.
pub fn gamma_exact(sd: &SpectralData, n: u32, zeta: f64) -> Result<Vec<f64>, OracleError> {
    check_lambda(sd)?;
    if !zeta.is_finite() {
        return Err(OracleError::NonFiniteZeta(zeta));
    }
    let k = sd.k();
    let b = sd.b as f64;
    let bl = sd.b_lambda();

    let t0 = zeta / bl.powi(n as i32);
    let mut gamma: Vec<f64> = sd.nu.iter().map(|&v| v * t0).collect();

    // ln M_ij with zero entries as -inf, which log_sum_exp skips.
    let ln_m: Vec<Vec<f64>> = (0..k)
        .map(|i| sd.matrix.row(i).iter().map(|&e| e.ln()).collect())
        .collect();
    let mut terms = vec![0.0f64; k];
    let mut next = vec![0.0f64; k];
    for _ in 0..n {
        for i in 0..k {
            for j in 0..k {
                terms[j] = ln_m[i][j] + gamma[j];
            }
            next[i] = b * log_sum_exp(&terms);
        }
        std::mem::swap(&mut gamma, &mut next);
    }
    Ok(gamma)
}

/// Log-MGF values on a grid of `(level, state, zeta)` cells.
#[derive(Debug, Clone, Serialize)]
pub struct MgfTable {
    /// Sorted, deduplicated evaluation points.
    pub zeta_grid: Vec<f64>,
    /// Levels `0..=n_max`.
    pub levels: Vec<u32>,
    /// `gamma[level_idx][state][zeta_idx]`.
    pub gamma: Vec<Vec<Vec<f64>>>,
}

impl MgfTable {
    pub fn k(&self) -> usize {
        self.gamma.first().map_or(0, |g| g.len())
    }

    pub fn gamma_at(&self, level_idx: usize, state: usize, zeta_idx: usize) -> f64 {
        self.gamma[level_idx][state][zeta_idx]
    }
}

/// Evaluate the exact log-MGF recursion over all levels up to `n_max`.
pub fn mgf_exact(sd: &SpectralData, n_max: u32, zeta_grid: &[f64]) -> Result<MgfTable, OracleError> {
    check_lambda(sd)?;
    let mut grid: Vec<f64> = Vec::with_capacity(zeta_grid.len());
    for &z in zeta_grid {
        if !z.is_finite() {
            return Err(OracleError::NonFiniteZeta(z));
        }
        grid.push(z);
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let levels: Vec<u32> = (0..=n_max).collect();
    let mut gamma = Vec::with_capacity(levels.len());
    for &n in &levels {
        let mut per_state = vec![Vec::with_capacity(grid.len()); sd.k()];
        for &z in &grid {
            let g = gamma_exact(sd, n, z)?;
            for (i, gi) in g.into_iter().enumerate() {
                per_state[i].push(gi);
            }
        }
        gamma.push(per_state);
    }
    Ok(MgfTable {
        zeta_grid: grid,
        levels,
        gamma,
    })
}

/// Conditional mean and raw second moment of `S_n` per root state.
#[derive(Debug, Clone, Serialize)]
pub struct MomentTable {
    pub levels: Vec<u32>,
    /// `mean[level_idx][state]`; stays at `nu` up to float drift.
    pub mean: Vec<Vec<f64>>,
    /// `second_moment[level_idx][state] = E[S_n^2 | root state]`.
    pub second_moment: Vec<Vec<f64>>,
}

impl MomentTable {
    /// Conditional variance at a cell.
    pub fn variance(&self, level_idx: usize, state: usize) -> f64 {
        let m = self.mean[level_idx][state];
        self.second_moment[level_idx][state] - m * m
    }
}

/// Exact mean/second-moment recursions.
///
/// Conditioned on the root, the `b` child subtree sums are i.i.d., which
/// closes both recursions: with `u_n(i) = sum_j M_ij mean_n(j)`,
/// `mean_{n+1}(i) = u_n(i)/lambda` and
/// `v_{n+1}(i) = (b lambda^2)^{-1} sum_j M_ij v_n(j) + (1 - 1/b)(u_n(i)/lambda)^2`.
/// The mean stays at `nu` up to float drift; it is propagated, not assumed.
pub fn moments_exact(sd: &SpectralData, n_max: u32) -> Result<MomentTable, OracleError> {
    check_lambda(sd)?;
    let k = sd.k();
    let b = sd.b as f64;
    let lambda = sd.lambda;

    let levels: Vec<u32> = (0..=n_max).collect();
    let mut mean = Vec::with_capacity(levels.len());
    let mut second = Vec::with_capacity(levels.len());
    mean.push(sd.nu.clone());
    second.push(sd.nu.iter().map(|&v| v * v).collect::<Vec<f64>>());

    for _ in 0..n_max {
        let prev_mean: &Vec<f64> = mean.last().unwrap();
        let prev_second: &Vec<f64> = second.last().unwrap();
        let mut next_mean = vec![0.0f64; k];
        let mut next_second = vec![0.0f64; k];
        for i in 0..k {
            let row = sd.matrix.row(i);
            let child_mean: f64 = (0..k).map(|j| row[j] * prev_mean[j]).sum();
            let child_second: f64 = (0..k).map(|j| row[j] * prev_second[j]).sum();
            next_mean[i] = child_mean / lambda;
            next_second[i] = child_second / (b * lambda * lambda)
                + (1.0 - 1.0 / b) * (child_mean / lambda) * (child_mean / lambda);
        }
        mean.push(next_mean);
        second.push(next_second);
    }
    Ok(MomentTable {
        levels,
        mean,
        second_moment: second,
    })
}

/// Exact law of `S_n` for one root state, by exhausting every state
/// assignment of the depth-`n` tree.
#[derive(Debug, Clone, Serialize)]
pub struct BruteForceResult {
    pub n: u32,
    pub root_state: usize,
    /// `(value, probability)`, sorted by value, equal values merged.
    pub distribution: Vec<(f64, f64)>,
    /// Total enumerated probability; 1 up to float drift.
    pub total_probability: f64,
}

impl BruteForceResult {
    pub fn mean(&self) -> f64 {
        self.distribution.iter().map(|(s, p)| s * p).sum()
    }

    pub fn second_moment(&self) -> f64 {
        self.distribution.iter().map(|(s, p)| s * s * p).sum()
    }

    pub fn mgf(&self, zeta: f64) -> f64 {
        self.distribution
            .iter()
            .map(|(s, p)| p * (zeta * s).exp())
            .sum()
    }

    pub fn log_mgf(&self, zeta: f64) -> f64 {
        self.mgf(zeta).ln()
    }
}

/// Enumerate all state assignments of the depth-`n` complete `b`-ary tree
/// with exact path probabilities.
pub fn brute_force(
    sd: &SpectralData,
    n: u32,
    root_state: usize,
) -> Result<BruteForceResult, OracleError> {
    check_lambda(sd)?;
    assert!(root_state < sd.k(), "root state out of range");
    if n > BRUTE_FORCE_MAX_LEVEL {
        return Err(OracleError::LevelTooDeep {
            n,
            max: BRUTE_FORCE_MAX_LEVEL,
        });
    }
    let b = sd.b as u128;
    let mut node_count: u128 = 0;
    let mut level_size: u128 = 1;
    for _ in 0..=n {
        node_count += level_size;
        level_size = level_size.saturating_mul(b);
    }
    let assignments = (sd.k() as u128)
        .checked_pow(u32::try_from(node_count).unwrap_or(u32::MAX))
        .unwrap_or(u128::MAX);
    if assignments > BRUTE_FORCE_BUDGET {
        return Err(OracleError::BudgetExceeded {
            needed: assignments,
            budget: BRUTE_FORCE_BUDGET,
        });
    }

    // Preorder node list: (parent index, depth).
    let mut nodes: Vec<(usize, u32)> = vec![(usize::MAX, 0)];
    build_preorder(&mut nodes, sd.b, n, 0, 0);

    let k = sd.k();
    let mut states = vec![0usize; nodes.len()];
    states[0] = root_state;
    let mut census = vec![0u64; k];
    if n == 0 {
        census[root_state] = 1;
    }
    let mut by_census: BTreeMap<Vec<u64>, f64> = BTreeMap::new();
    enumerate(
        sd, &nodes, 1, n, 1.0, &mut states, &mut census, &mut by_census,
    );

    let bl_pow = sd.b_lambda().powi(n as i32);
    let mut support: Vec<(f64, f64)> = by_census
        .iter()
        .map(|(census, &p)| {
            let dot: f64 = census
                .iter()
                .zip(&sd.nu)
                .map(|(&c, &v)| c as f64 * v)
                .sum();
            let mut s = dot / bl_pow;
            if s == 0.0 {
                s = 0.0; // fold -0.0 into +0.0 so merging is exact
            }
            (s, p)
        })
        .collect();
    support.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut merged: Vec<(f64, f64)> = Vec::with_capacity(support.len());
    for (s, p) in support {
        match merged.last_mut() {
            Some(last) if last.0 == s => last.1 += p,
            _ => merged.push((s, p)),
        }
    }
    let total: f64 = merged.iter().map(|(_, p)| p).sum();
    Ok(BruteForceResult {
        n,
        root_state,
        distribution: merged,
        total_probability: total,
    })
}

fn build_preorder(nodes: &mut Vec<(usize, u32)>, b: u32, n: u32, parent: usize, depth: u32) {
    if depth == n {
        return;
    }
    for _ in 0..b {
        let idx = nodes.len();
        nodes.push((parent, depth + 1));
        build_preorder(nodes, b, n, idx, depth + 1);
    }
}

#[allow(clippy::too_many_arguments)]
fn enumerate(
    sd: &SpectralData,
    nodes: &[(usize, u32)],
    pos: usize,
    n: u32,
    prob: f64,
    states: &mut [usize],
    census: &mut [u64],
    out: &mut BTreeMap<Vec<u64>, f64>,
) {
    if pos == nodes.len() {
        *out.entry(census.to_vec()).or_insert(0.0) += prob;
        return;
    }
    let (parent, depth) = nodes[pos];
    let row = sd.matrix.row(states[parent]);
    let is_leaf = depth == n;
    for (j, &edge_prob) in row.iter().enumerate() {
        if edge_prob == 0.0 {
            continue;
        }
        states[pos] = j;
        if is_leaf {
            census[j] += 1;
        }
        enumerate(sd, nodes, pos + 1, n, prob * edge_prob, states, census, out);
        if is_leaf {
            census[j] -= 1;
        }
    }
}

/// Gauss-Hermite estimate of `E[e^{zeta S_n^2} | root state i]` per state.
#[derive(Debug, Clone, Serialize)]
pub struct SquareMgfEstimate {
    pub n: u32,
    pub zeta: f64,
    pub nodes: usize,
    /// Per-state values; may overflow to `inf` when the integral diverges.
    pub values: Vec<f64>,
    /// Per-state natural logs of the values (finite much longer).
    pub log_values: Vec<f64>,
    /// Worst per-state relative change from the `nodes/2` rule.
    pub rel_change: f64,
    pub converged: bool,
}

/// Quadrature for the squared-estimator MGF through the Gaussian identity
/// `E[e^{zeta S^2}] = E_X[Gamma(sqrt(2 zeta) X)]`, `X` standard normal.
pub fn square_mgf_quadrature(
    sd: &SpectralData,
    n: u32,
    zeta: f64,
    nodes: usize,
) -> Result<SquareMgfEstimate, OracleError> {
    check_lambda(sd)?;
    if !zeta.is_finite() {
        return Err(OracleError::NonFiniteZeta(zeta));
    }
    if zeta < 0.0 {
        return Err(OracleError::NegativeZeta(zeta));
    }
    if nodes < MIN_QUADRATURE_NODES {
        return Err(OracleError::TooFewNodes(nodes));
    }
    let k = sd.k();
    if zeta == 0.0 {
        return Ok(SquareMgfEstimate {
            n,
            zeta,
            nodes,
            values: vec![1.0; k],
            log_values: vec![0.0; k],
            rel_change: 0.0,
            converged: true,
        });
    }

    let coarse = eval_square_log(sd, n, zeta, nodes / 2)?;
    let fine = eval_square_log(sd, n, zeta, nodes)?;
    let mut rel = 0.0f64;
    for i in 0..k {
        let d = (fine[i] - coarse[i]).exp_m1().abs();
        rel = if d.is_nan() { f64::INFINITY } else { rel.max(d) };
    }
    let converged = rel <= QUADRATURE_REL_TOL;
    Ok(SquareMgfEstimate {
        n,
        zeta,
        nodes,
        values: fine.iter().map(|&l| l.exp()).collect(),
        log_values: fine,
        rel_change: rel,
        converged,
    })
}

fn eval_square_log(sd: &SpectralData, n: u32, zeta: f64, nodes: usize) -> Result<Vec<f64>, OracleError> {
    let rule = GaussHermite::new(nodes);
    let k = sd.k();
    // E[g(X)] = pi^{-1/2} sum_j w_j g(sqrt(2) t_j) with g = Gamma_n(sqrt(2 zeta) x),
    // so the MGF argument at node j is 2 sqrt(zeta) t_j.
    let half_ln_pi = 0.5 * std::f64::consts::PI.ln();
    let mut per_state: Vec<Vec<f64>> = vec![Vec::with_capacity(nodes); k];
    for (&t, &w) in rule.nodes().iter().zip(rule.weights()) {
        let arg = 2.0 * zeta.sqrt() * t;
        let gamma = gamma_exact(sd, n, arg)?;
        let ln_w = w.ln();
        for i in 0..k {
            per_state[i].push(ln_w + gamma[i]);
        }
    }
    Ok(per_state
        .iter()
        .map(|terms| log_sum_exp(terms) - half_ln_pi)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{analyze, binary_symmetric_channel, validate_channel};
    use approx::assert_abs_diff_eq;

    fn bsc(p: f64) -> SpectralData {
        analyze(&binary_symmetric_channel(p).unwrap(), 2).unwrap()
    }

    #[test]
    fn level_zero_is_linear_in_zeta() {
        let sd = bsc(0.1);
        for zeta in [-2.0, -0.5, 0.0, 0.3, 4.0] {
            let g = gamma_exact(&sd, 0, zeta).unwrap();
            assert_eq!(g[0], sd.nu[0] * zeta);
            assert_eq!(g[1], sd.nu[1] * zeta);
        }
    }

    #[test]
    fn level_one_matches_frozen_value() {
        // (0.9 e^{0.3125} + 0.1 e^{-0.3125})^2, frozen from the 4-config
        // enumeration.
        let sd = bsc(0.1);
        let g = gamma_exact(&sd, 1, 0.5).unwrap();
        assert_abs_diff_eq!(g[0].exp(), 1.698_631_839_805_290, epsilon = 1e-12);
    }

    #[test]
    fn mgf_at_zero_is_one() {
        let sd = bsc(0.1);
        for n in [0, 1, 4, 12, 24] {
            let g = gamma_exact(&sd, n, 0.0).unwrap();
            assert!(g.iter().all(|x| x.abs() <= 1e-9), "gamma(0) = {g:?} at n={n}");
        }
    }

    #[test]
    fn table_is_sorted_and_queried_in_order() {
        let sd = bsc(0.1);
        let table = mgf_exact(&sd, 3, &[1.0, -1.0, 0.25, 0.25]).unwrap();
        assert_eq!(table.zeta_grid, vec![-1.0, 0.25, 1.0]);
        assert_eq!(table.levels, vec![0, 1, 2, 3]);
        assert_eq!(table.k(), 2);
        // Level-0 column reproduces nu * zeta exactly.
        for (zi, &z) in table.zeta_grid.iter().enumerate() {
            assert_eq!(table.gamma_at(0, 0, zi), sd.nu[0] * z);
        }
    }

    #[test]
    fn brute_force_level_one_distribution() {
        let sd = bsc(0.1);
        let bf = brute_force(&sd, 1, 0).unwrap();
        let expected = [(-1.25, 0.01), (0.0, 0.18), (1.25, 0.81)];
        assert_eq!(bf.distribution.len(), 3);
        for ((s, p), (es, ep)) in bf.distribution.iter().zip(expected) {
            assert_abs_diff_eq!(*s, es, epsilon = 1e-12);
            assert_abs_diff_eq!(*p, ep, epsilon = 1e-14);
        }
        assert_abs_diff_eq!(bf.total_probability, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(bf.mean(), sd.nu[0], epsilon = 1e-12);
    }

    #[test]
    fn brute_force_matches_recursion_to_level_two() {
        for p in [0.1, 0.3] {
            let sd = bsc(p);
            for n in 0..=2u32 {
                for root in 0..2usize {
                    let bf = brute_force(&sd, n, root).unwrap();
                    assert_abs_diff_eq!(bf.total_probability, 1.0, epsilon = 1e-12);
                    for zeta in [-2.0, -0.5, 0.25, 1.0, 2.0] {
                        let g = gamma_exact(&sd, n, zeta).unwrap();
                        assert_abs_diff_eq!(bf.log_mgf(zeta), g[root], epsilon = 1e-10);
                    }
                    let table = moments_exact(&sd, n).unwrap();
                    assert_abs_diff_eq!(bf.mean(), table.mean[n as usize][root], epsilon = 1e-10);
                    assert_abs_diff_eq!(
                        bf.second_moment(),
                        table.second_moment[n as usize][root],
                        epsilon = 1e-10
                    );
                }
            }
        }
    }

    #[test]
    fn brute_force_budget_is_enforced() {
        let sd = bsc(0.1);
        assert!(matches!(
            brute_force(&sd, 4, 0).unwrap_err(),
            OracleError::LevelTooDeep { .. }
        ));
    }

    #[test]
    fn second_moment_level_one_frozen() {
        let sd = bsc(0.1);
        let t = moments_exact(&sd, 1).unwrap();
        assert_abs_diff_eq!(t.second_moment[1][0], 1.28125, epsilon = 1e-13);
        assert_abs_diff_eq!(t.second_moment[1][1], 1.28125, epsilon = 1e-13);
    }

    #[test]
    fn mean_recursion_stays_unbiased() {
        for p in [0.1, 0.3, 0.45] {
            let sd = bsc(p);
            let t = moments_exact(&sd, 12).unwrap();
            for level in &t.mean {
                assert_abs_diff_eq!(level[0], sd.nu[0], epsilon = 1e-11);
                assert_abs_diff_eq!(level[1], sd.nu[1], epsilon = 1e-11);
            }
        }
    }

    #[test]
    fn subcritical_second_moment_growth_rate() {
        let sd = bsc(0.3);
        let t = moments_exact(&sd, 12).unwrap();
        let ratio = t.second_moment[12][0] / t.second_moment[11][0];
        let target = 1.0 / sd.ks_product;
        assert!((ratio / target - 1.0).abs() < 0.05, "ratio {ratio} vs {target}");
    }

    #[test]
    fn mgf_derivatives_at_zero_match_moments() {
        // d/dz gamma(0) = mean, d2/dz2 gamma(0) = variance.
        for p in [0.1, 0.3] {
            let sd = bsc(p);
            let t = moments_exact(&sd, 8).unwrap();
            for n in [1u32, 4, 8] {
                let h = 1e-5;
                let gp = gamma_exact(&sd, n, h).unwrap();
                let gm = gamma_exact(&sd, n, -h).unwrap();
                for i in 0..2 {
                    let d1 = (gp[i] - gm[i]) / (2.0 * h);
                    assert_abs_diff_eq!(d1, sd.nu[i], epsilon = 1e-6);
                }
                let h2 = 1e-4;
                let gp2 = gamma_exact(&sd, n, h2).unwrap();
                let gm2 = gamma_exact(&sd, n, -h2).unwrap();
                for i in 0..2 {
                    let d2 = (gp2[i] + gm2[i]) / (h2 * h2);
                    let var = t.variance(n as usize, i);
                    assert!(
                        (d2 - var).abs() <= 1e-4 * var.abs().max(1.0),
                        "n={n} i={i}: fd {d2} vs variance {var}"
                    );
                }
            }
        }
    }

    #[test]
    fn log_space_never_overflows_at_extremes() {
        let skewed = analyze(
            &validate_channel(vec![vec![0.99, 0.01], vec![0.5, 0.5]]).unwrap(),
            2,
        )
        .unwrap();
        for sd in [bsc(0.1), bsc(0.3), skewed] {
            for zeta in [-50.0, 50.0] {
                let g = gamma_exact(&sd, 24, zeta).unwrap();
                assert!(g.iter().all(|x| x.is_finite()), "gamma {g:?} at zeta {zeta}");
            }
        }
    }

    #[test]
    fn square_mgf_level_zero_closed_form() {
        let sd = bsc(0.1);
        for zeta in [0.05, 0.2, 1.0] {
            let est = square_mgf_quadrature(&sd, 0, zeta, 64).unwrap();
            assert!(est.converged);
            for i in 0..2 {
                let exact = (zeta * sd.nu[i] * sd.nu[i]).exp();
                assert_abs_diff_eq!(est.values[i], exact, epsilon = 1e-8 * exact);
            }
        }
    }

    #[test]
    fn square_mgf_zeta_zero_is_exactly_one() {
        let sd = bsc(0.1);
        let est = square_mgf_quadrature(&sd, 5, 0.0, 64).unwrap();
        assert_eq!(est.values, vec![1.0, 1.0]);
        assert!(est.converged);
    }

    #[test]
    fn square_mgf_rejects_bad_arguments() {
        let sd = bsc(0.1);
        assert!(matches!(
            square_mgf_quadrature(&sd, 2, -0.1, 64).unwrap_err(),
            OracleError::NegativeZeta(_)
        ));
        assert!(matches!(
            square_mgf_quadrature(&sd, 2, 0.1, 8).unwrap_err(),
            OracleError::TooFewNodes(8)
        ));
    }
}
