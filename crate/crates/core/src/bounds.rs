//! Executable checks of the exponential-moment bounds.
//!
//! Above the Kesten-Stigum threshold the log-MGF of `S_n` is dominated by
//! `nu_i zeta + c zeta^2` for a level-independent `c`; below it the
//! quadratic coefficient must blow up while `Q_n` turns Gaussian. These
//! routines extract the empirical coefficient from exact MGF tables,
//! check the dominating bound pointwise, probe the squared-estimator
//! analogue by quadrature, and score the sub-critical CLT from batch
//! moments.

use serde::Serialize;
use thiserror::Error;

use crate::oracles::{square_mgf_quadrature, MgfTable, OracleError};
use crate::sim::BatchSummary;
use crate::spectral::{Phase, SpectralData};

/// Levels ignored by the monotone-decrease criterion.
const BURN_IN_LEVELS: usize = 2;
/// Allowed tail growth of `empirical_c` from `n_max/2` to `n_max`.
const TAIL_GROWTH_TOL: f64 = 0.10;
/// Pointwise slack for the theorem-form comparison, absorbing float drift
/// at `zeta = 0` where the bound is an equality.
pub const POINTWISE_SLACK: f64 = 1e-9;
const CLT_SKEWNESS_BAND: f64 = 0.1;
const CLT_EXCESS_KURTOSIS_BAND: f64 = 0.2;
const CLT_MEAN_GAP_SE: f64 = 4.0;
const CLT_MIN_REPLICAS_PER_STATE: u64 = 10_000;
/// Stabilization band for the squared-estimator suprema (last 3 levels).
const CORO_STABILIZATION_TOL: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundError {
    #[error("need at least 8 nonzero zeta points, got {0}")]
    DegenerateGrid(usize),
    #[error("operation requires the {expected} phase, model is {actual}")]
    WrongPhase { expected: Phase, actual: Phase },
    #[error("quadrature did not converge at level {n} (relative change {rel_change})")]
    NotConverged { n: u32, rel_change: f64 },
    #[error("root state {state} has {count} replicas, need {CLT_MIN_REPLICAS_PER_STATE}")]
    InsufficientReplicas { state: usize, count: u64 },
    #[error("root state {0} appears in more than one batch summary")]
    DuplicateRootState(usize),
    #[error("no batch covers root state {0}")]
    MissingRootState(usize),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// The empirical quadratic coefficient per level:
/// `max over i and zeta != 0 of (gamma_n^i(zeta) - nu_i zeta) / zeta^2`.
#[derive(Debug, Clone, Serialize)]
pub struct EmpiricalC {
    pub levels: Vec<u32>,
    pub values: Vec<f64>,
    /// True when the sequence is non-increasing after a 2-level burn-in,
    /// or grows by less than 10% from `n_max/2` to `n_max`.
    pub uniformly_bounded: bool,
}

pub fn extract_empirical_c(table: &MgfTable, nu: &[f64]) -> Result<EmpiricalC, BoundError> {
    let nonzero = table.zeta_grid.iter().filter(|&&z| z != 0.0).count();
    if nonzero < 8 {
        return Err(BoundError::DegenerateGrid(nonzero));
    }
    let k = table.k();
    let mut values = Vec::with_capacity(table.levels.len());
    for li in 0..table.levels.len() {
        let mut c = f64::NEG_INFINITY;
        for i in 0..k {
            for (zi, &z) in table.zeta_grid.iter().enumerate() {
                if z == 0.0 {
                    continue;
                }
                let excess = table.gamma_at(li, i, zi) - nu[i] * z;
                c = c.max(excess / (z * z));
            }
        }
        // The excess is non-negative by convexity of gamma; the max over
        // exact zeros at level 0 can land at -0.0, fold it to 0.
        values.push(c.max(0.0));
    }

    let last = values.len() - 1;
    let monotone = values
        .windows(2)
        .skip(BURN_IN_LEVELS)
        .all(|w| w[1] <= w[0] + 1e-12);
    let half = table.levels.len() / 2;
    let tail_ok = if values[half] > 0.0 {
        (values[last] - values[half]) / values[half] < TAIL_GROWTH_TOL
    } else {
        values[last] <= 1e-12
    };
    Ok(EmpiricalC {
        levels: table.levels.clone(),
        values,
        uniformly_bounded: monotone || tail_ok,
    })
}

/// Full verification record for one model and one table.
#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub model_id: String,
    pub phase: Phase,
    pub zeta_grid: Vec<f64>,
    pub levels: Vec<u32>,
    pub empirical_c: Vec<f64>,
    pub uniformly_bounded: bool,
    /// Infimum of admissible small-argument coefficients; `None` outside
    /// the Kesten-Stigum phase where the formula is meaningless.
    pub c_prime_floor: Option<f64>,
    pub nu: Vec<f64>,
    #[serde(skip)]
    pub table: MgfTable,
    pub corollary: Option<CorollaryReport>,
}

impl BoundReport {
    pub fn build(model_id: &str, sd: &SpectralData, table: MgfTable) -> Result<Self, BoundError> {
        let extraction = extract_empirical_c(&table, &sd.nu)?;
        Ok(BoundReport {
            model_id: model_id.to_string(),
            phase: sd.phase(),
            zeta_grid: table.zeta_grid.clone(),
            levels: extraction.levels,
            empirical_c: extraction.values,
            uniformly_bounded: extraction.uniformly_bounded,
            c_prime_floor: crate::spectral::cprime_lower_bound(sd).ok(),
            nu: sd.nu.clone(),
            table,
            corollary: None,
        })
    }

    /// The tightest constant the table itself certifies.
    pub fn tight_c(&self) -> f64 {
        self.empirical_c
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// One table cell that breaks the bound.
#[derive(Debug, Clone, Serialize)]
pub struct Violation {
    pub n: u32,
    pub state: usize,
    pub zeta: f64,
    pub gamma: f64,
    pub bound: f64,
}

/// Pointwise verdicts of `gamma_n^i(zeta) <= nu_i zeta + c zeta^2`.
#[derive(Debug, Clone, Serialize)]
pub struct TheoremCheck {
    pub c: f64,
    pub pass: bool,
    pub violations: usize,
    pub first_violation: Option<Violation>,
    /// Verdict per tabulated level.
    pub per_level_pass: Vec<bool>,
}

pub fn check_theorem_bound(report: &BoundReport, c: f64) -> TheoremCheck {
    let table = &report.table;
    let k = table.k();
    let mut per_level_pass = Vec::with_capacity(table.levels.len());
    let mut violations = 0usize;
    let mut first: Option<Violation> = None;
    for (li, &n) in table.levels.iter().enumerate() {
        let mut level_ok = true;
        for i in 0..k {
            for (zi, &z) in table.zeta_grid.iter().enumerate() {
                let gamma = table.gamma_at(li, i, zi);
                let bound = report.nu[i] * z + c * z * z;
                if gamma > bound + POINTWISE_SLACK {
                    violations += 1;
                    level_ok = false;
                    if first.is_none() {
                        first = Some(Violation {
                            n,
                            state: i,
                            zeta: z,
                            gamma,
                            bound,
                        });
                    }
                }
            }
        }
        per_level_pass.push(level_ok);
    }
    TheoremCheck {
        c,
        pass: violations == 0,
        violations,
        first_violation: first,
        per_level_pass,
    }
}

/// Suprema of the squared-estimator MGF over a level range.
#[derive(Debug, Clone, Serialize)]
pub struct CorollaryReport {
    pub zeta_probe: f64,
    pub levels: Vec<u32>,
    /// `max_i Gamma~_n^i(zeta_probe)` per level.
    pub sup_per_level: Vec<f64>,
    pub log_sup_per_level: Vec<f64>,
    /// Relative spread of the last three suprema below 5%.
    pub stabilized: bool,
}

pub fn check_corollary_bound(
    sd: &SpectralData,
    levels: impl IntoIterator<Item = u32>,
    zeta_probe: f64,
    nodes: usize,
) -> Result<CorollaryReport, BoundError> {
    let levels: Vec<u32> = levels.into_iter().collect();
    let mut sup = Vec::with_capacity(levels.len());
    let mut log_sup = Vec::with_capacity(levels.len());
    for &n in &levels {
        let est = square_mgf_quadrature(sd, n, zeta_probe, nodes)?;
        if !est.converged {
            return Err(BoundError::NotConverged {
                n,
                rel_change: est.rel_change,
            });
        }
        let s = est.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ls = est
            .log_values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        sup.push(s);
        log_sup.push(ls);
    }
    let stabilized = if sup.len() >= 3 {
        let tail = &sup[sup.len() - 3..];
        let lo = tail.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = tail.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        lo > 0.0 && hi.is_finite() && (hi - lo) / lo < CORO_STABILIZATION_TOL
    } else {
        false
    };
    Ok(CorollaryReport {
        zeta_probe,
        levels,
        sup_per_level: sup,
        log_sup_per_level: log_sup,
        stabilized,
    })
}

/// `Q_n` moment diagnostics for one root state.
#[derive(Debug, Clone, Serialize)]
pub struct QnDiagnostics {
    pub root_state: usize,
    pub count: u64,
    pub mean: f64,
    pub se_mean: f64,
    pub variance: f64,
    pub skewness: f64,
    /// Large-sample standard error `sqrt(6/count)`.
    pub se_skewness: f64,
    pub excess_kurtosis: f64,
    /// Large-sample standard error `sqrt(24/count)`.
    pub se_excess_kurtosis: f64,
}

/// Gaussian-consistency report for `Q_n` below the threshold.
#[derive(Debug, Clone, Serialize)]
pub struct CltReport {
    pub n: u32,
    pub per_state: Vec<QnDiagnostics>,
    pub max_mean_gap: f64,
    /// Largest mean gap measured in pooled standard errors.
    pub max_gap_in_pooled_se: f64,
    pub gaussian_consistent: bool,
}

/// Score the Kesten-Stigum CLT from batch summaries.
///
/// `batches` must jointly cover every root state exactly once — either one
/// stationary-root batch, or one fixed-root batch per state (the
/// cross-state mean comparison needs all of them).
pub fn clt_diagnostics(
    sd: &SpectralData,
    n: u32,
    batches: &[BatchSummary],
) -> Result<CltReport, BoundError> {
    let phase = sd.phase();
    if phase != Phase::SubCritical {
        return Err(BoundError::WrongPhase {
            expected: Phase::SubCritical,
            actual: phase,
        });
    }
    let k = sd.k();
    let mut per_state: Vec<Option<QnDiagnostics>> = vec![None; k];
    for batch in batches {
        for r in &batch.per_root_state {
            if per_state[r.root_state].is_some() {
                return Err(BoundError::DuplicateRootState(r.root_state));
            }
            per_state[r.root_state] = Some(QnDiagnostics {
                root_state: r.root_state,
                count: r.count,
                mean: r.mean_q,
                se_mean: r.se_mean_q,
                variance: r.var_q,
                skewness: r.skewness_q,
                se_skewness: (6.0 / r.count as f64).sqrt(),
                excess_kurtosis: r.excess_kurtosis_q,
                se_excess_kurtosis: (24.0 / r.count as f64).sqrt(),
            });
        }
    }
    let per_state: Vec<QnDiagnostics> = per_state
        .into_iter()
        .enumerate()
        .map(|(i, d)| d.ok_or(BoundError::MissingRootState(i)))
        .collect::<Result<_, _>>()?;
    for d in &per_state {
        if d.count < CLT_MIN_REPLICAS_PER_STATE {
            return Err(BoundError::InsufficientReplicas {
                state: d.root_state,
                count: d.count,
            });
        }
    }

    let mut max_gap = 0.0f64;
    let mut max_gap_se = 0.0f64;
    for a in 0..per_state.len() {
        for b in a + 1..per_state.len() {
            let gap = (per_state[a].mean - per_state[b].mean).abs();
            let pooled =
                (per_state[a].se_mean.powi(2) + per_state[b].se_mean.powi(2)).sqrt();
            max_gap = max_gap.max(gap);
            if pooled > 0.0 {
                max_gap_se = max_gap_se.max(gap / pooled);
            } else if gap > 0.0 {
                max_gap_se = f64::INFINITY;
            }
        }
    }

    let moments_ok = per_state.iter().all(|d| {
        d.skewness.abs() <= CLT_SKEWNESS_BAND
            && d.excess_kurtosis.abs() <= CLT_EXCESS_KURTOSIS_BAND
    });
    let gap_ok = max_gap_in_band(max_gap_se);
    Ok(CltReport {
        n,
        per_state,
        max_mean_gap: max_gap,
        max_gap_in_pooled_se: max_gap_se,
        gaussian_consistent: moments_ok && gap_ok,
    })
}

fn max_gap_in_band(gap_se: f64) -> bool {
    gap_se <= CLT_MEAN_GAP_SE
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::mgf_exact;
    use crate::rng::derive_seed;
    use crate::sim::{run_batch, RootCondition, SimSpec};
    use crate::spectral::{analyze, binary_symmetric_channel};
    use approx::assert_abs_diff_eq;

    fn bsc(p: f64) -> SpectralData {
        analyze(&binary_symmetric_channel(p).unwrap(), 2).unwrap()
    }

    fn reference_grid() -> Vec<f64> {
        let mut g: Vec<f64> = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 10.0]
            .iter()
            .flat_map(|&z| [z, -z])
            .collect();
        g.push(0.0);
        g
    }

    #[test]
    fn level_zero_coefficient_is_zero() {
        let sd = bsc(0.1);
        let table = mgf_exact(&sd, 3, &reference_grid()).unwrap();
        let c = extract_empirical_c(&table, &sd.nu).unwrap();
        assert_eq!(c.values[0], 0.0);
    }

    #[test]
    fn degenerate_grid_is_rejected() {
        let sd = bsc(0.1);
        let table = mgf_exact(&sd, 3, &[0.25, 0.5, 1.0, 2.0, 0.0]).unwrap();
        assert!(matches!(
            extract_empirical_c(&table, &sd.nu).unwrap_err(),
            BoundError::DegenerateGrid(4)
        ));
    }

    #[test]
    fn ks_phase_coefficient_is_bounded() {
        let sd = bsc(0.1);
        let table = mgf_exact(&sd, 12, &reference_grid()).unwrap();
        let c = extract_empirical_c(&table, &sd.nu).unwrap();
        assert!(c.uniformly_bounded, "values {:?}", c.values);
        assert!(c.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn subcritical_coefficient_diverges() {
        let sd = bsc(0.3);
        let table = mgf_exact(&sd, 12, &reference_grid()).unwrap();
        let c = extract_empirical_c(&table, &sd.nu).unwrap();
        assert!(!c.uniformly_bounded);
        assert!(c.values[12] >= 2.0 * c.values[6], "values {:?}", c.values);
    }

    #[test]
    fn theorem_check_passes_at_tight_constant() {
        let sd = bsc(0.1);
        let table = mgf_exact(&sd, 12, &reference_grid()).unwrap();
        let report = BoundReport::build("bsc-0.1", &sd, table).unwrap();
        let check = check_theorem_bound(&report, report.tight_c() + 1e-9);
        assert!(check.pass, "first violation {:?}", check.first_violation);
        assert!(check.per_level_pass.iter().all(|&p| p));

        let zero = check_theorem_bound(&report, 0.0);
        assert!(!zero.pass);
        assert!(zero.first_violation.is_some());
    }

    #[test]
    fn flip_invariance_of_empirical_c() {
        let sd = bsc(0.1);
        let table = mgf_exact(&sd, 8, &reference_grid()).unwrap();
        let c = extract_empirical_c(&table, &sd.nu).unwrap();

        let mut flipped = sd.clone();
        for v in flipped.nu.iter_mut() {
            *v = -*v;
        }
        let table_f = mgf_exact(&flipped, 8, &reference_grid()).unwrap();
        let c_f = extract_empirical_c(&table_f, &flipped.nu).unwrap();
        for (a, b) in c.values.iter().zip(&c_f.values) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-11);
        }
    }

    #[test]
    fn corollary_probe_at_zero_is_flat() {
        let sd = bsc(0.1);
        let rep = check_corollary_bound(&sd, 0..=6, 0.0, 64).unwrap();
        assert!(rep.sup_per_level.iter().all(|&v| v == 1.0));
        assert!(rep.stabilized);
    }

    #[test]
    fn corollary_probe_stabilizes_in_ks_phase() {
        let sd = bsc(0.1);
        let rep = check_corollary_bound(&sd, 0..=8, 0.05, 64).unwrap();
        assert!(rep.stabilized, "suprema {:?}", rep.sup_per_level);
        assert!(rep.sup_per_level.iter().all(|v| v.is_finite()));
    }

    fn clt_batches(p: f64, n: u32, replicas: u64, seed: u64) -> (SpectralData, Vec<BatchSummary>) {
        let sd = bsc(p);
        let batches = (0..sd.k())
            .map(|state| {
                let spec = SimSpec::new(
                    sd.clone(),
                    n,
                    RootCondition::FixedState(state),
                    replicas,
                    derive_seed(seed, state as u64),
                )
                .unwrap();
                run_batch(&spec, &[]).unwrap()
            })
            .collect();
        (sd, batches)
    }

    #[test]
    fn clt_passes_subcritical_at_depth() {
        let (sd, batches) = clt_batches(0.3, 8, 20_000, 51);
        let rep = clt_diagnostics(&sd, 8, &batches).unwrap();
        assert!(
            rep.gaussian_consistent,
            "skew/kurt {:?}",
            rep.per_state
                .iter()
                .map(|d| (d.skewness, d.excess_kurtosis))
                .collect::<Vec<_>>()
        );
    }

    #[test]
    fn clt_fails_at_level_zero() {
        let (sd, batches) = clt_batches(0.3, 0, 20_000, 53);
        let rep = clt_diagnostics(&sd, 0, &batches).unwrap();
        assert!(!rep.gaussian_consistent);
    }

    #[test]
    fn clt_rejects_ks_phase() {
        let (_, batches) = clt_batches(0.3, 2, 20_000, 55);
        let sd_ks = bsc(0.1);
        assert!(matches!(
            clt_diagnostics(&sd_ks, 2, &batches).unwrap_err(),
            BoundError::WrongPhase { .. }
        ));
    }

    #[test]
    fn clt_rejects_small_batches() {
        let (sd, batches) = clt_batches(0.3, 2, 100, 57);
        assert!(matches!(
            clt_diagnostics(&sd, 2, &batches).unwrap_err(),
            BoundError::InsufficientReplicas { .. }
        ));
    }
}
