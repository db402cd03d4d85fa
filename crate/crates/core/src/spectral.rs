//! Channel validation and spectral analysis.
//!
//! Everything downstream hangs off the second eigenpair of the channel
//! matrix: the stationary distribution `pi`, the second-largest (in
//! modulus) eigenvalue `lambda` with right eigenvector `nu` normalized so
//! that `sum_i pi_i nu_i^2 = 1`, and the product `b*lambda^2` whose
//! position relative to 1 decides the phase.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Row sums must match 1 this tightly.
pub const ROW_SUM_TOL: f64 = 1e-12;
/// Residual tolerance for the spectral invariants (`pi M = pi`, `M nu = lambda nu`, ...).
pub const SPECTRAL_TOL: f64 = 1e-10;
/// Imaginary parts (and modulus ties) below this are treated as zero.
const COMPLEX_TOL: f64 = 1e-9;
/// `|lambda|` below this makes `(b*lambda)^{-n}` meaningless.
const ZERO_LAMBDA_TOL: f64 = 1e-12;
/// Dead band around `b*lambda^2 = 1` for phase classification.
pub const PHASE_TOL: f64 = 1e-12;
/// QR/Schur iteration controls.
const EIGEN_EPS: f64 = 1e-12;
const EIGEN_MAX_ITER: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("channel must have at least 2 states, got k={0}")]
    TooSmall(usize),
    #[error("row {row} has {len} entries, expected {k}")]
    NotSquare { row: usize, len: usize, k: usize },
    #[error("row {row} is not a probability distribution: {reason}")]
    NotStochastic { row: usize, reason: String },
    #[error("positive-entry digraph is not strongly connected")]
    NotIrreducible,
    #[error("arity must be at least 2, got b={0}")]
    InvalidArity(u32),
    #[error("second-largest eigenvalue is not usable: {0}")]
    ComplexSecondEigenvalue(String),
    #[error("second eigenvalue is numerically zero, the estimator rescaling (b*lambda)^-n is undefined")]
    ZeroLambda,
    #[error("b*lambda^2 = {0} is not above the Kesten-Stigum threshold")]
    NotKestenStigum(f64),
    #[error("eigen computation failed: {0}")]
    NumericalFailure(String),
}

/// A validated k x k row-stochastic irreducible transition matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    k: usize,
    rows: Vec<Vec<f64>>,
}

impl ChannelMatrix {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.k, self.k, |i, j| self.rows[i][j])
    }
}

/// Validate raw entries as a channel matrix.
pub fn validate_channel(entries: Vec<Vec<f64>>) -> Result<ChannelMatrix, SpectralError> {
    let k = entries.len();
    if k < 2 {
        return Err(SpectralError::TooSmall(k));
    }
    for (i, row) in entries.iter().enumerate() {
        if row.len() != k {
            return Err(SpectralError::NotSquare {
                row: i,
                len: row.len(),
                k,
            });
        }
        let mut sum = 0.0;
        for &e in row {
            if !e.is_finite() {
                return Err(SpectralError::NotStochastic {
                    row: i,
                    reason: format!("non-finite entry {e}"),
                });
            }
            if e < 0.0 {
                return Err(SpectralError::NotStochastic {
                    row: i,
                    reason: format!("negative entry {e}"),
                });
            }
            if e > 1.0 {
                return Err(SpectralError::NotStochastic {
                    row: i,
                    reason: format!("entry {e} exceeds 1"),
                });
            }
            sum += e;
        }
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(SpectralError::NotStochastic {
                row: i,
                reason: format!("row sums to {sum}"),
            });
        }
    }
    if !strongly_connected(&entries) {
        return Err(SpectralError::NotIrreducible);
    }
    Ok(ChannelMatrix { k, rows: entries })
}

/// Strong connectivity of the positive-entry digraph: every state reachable
/// from state 0 in both the graph and its transpose.
fn strongly_connected(rows: &[Vec<f64>]) -> bool {
    let k = rows.len();
    let reach = |transpose: bool| -> usize {
        let mut seen = vec![false; k];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for v in 0..k {
                let w = if transpose { rows[v][u] } else { rows[u][v] };
                if w > 0.0 && !seen[v] {
                    seen[v] = true;
                    count += 1;
                    stack.push(v);
                }
            }
        }
        count
    };
    reach(false) == k && reach(true) == k
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    KestenStigum,
    SubCritical,
    Critical,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::KestenStigum => write!(f, "KestenStigum"),
            Phase::SubCritical => write!(f, "SubCritical"),
            Phase::Critical => write!(f, "Critical"),
        }
    }
}

/// Spectral data of a channel on the b-ary tree.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralData {
    pub matrix: ChannelMatrix,
    /// Tree arity.
    pub b: u32,
    /// Stationary distribution, `pi M = pi`.
    pub pi: Vec<f64>,
    /// Second-largest-in-modulus eigenvalue (real).
    pub lambda: f64,
    /// Right eigenvector for `lambda`, normalized so `sum pi_i nu_i^2 = 1`,
    /// largest-magnitude entry positive.
    pub nu: Vec<f64>,
    /// `b * lambda^2`.
    pub ks_product: f64,
}

impl SpectralData {
    pub fn k(&self) -> usize {
        self.matrix.k()
    }

    pub fn b_lambda(&self) -> f64 {
        self.b as f64 * self.lambda
    }

    pub fn phase(&self) -> Phase {
        classify_phase(self)
    }

    pub fn nu_inf_norm(&self) -> f64 {
        self.nu.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Compute the full spectral data for a channel on the b-ary tree.
pub fn analyze(matrix: &ChannelMatrix, b: u32) -> Result<SpectralData, SpectralError> {
    if b < 2 {
        return Err(SpectralError::InvalidArity(b));
    }
    let k = matrix.k();
    let m = matrix.to_dmatrix();

    let pi = stationary_distribution(matrix)?;
    let lambda = second_eigenvalue(&m)?;
    if lambda.abs() < ZERO_LAMBDA_TOL {
        return Err(SpectralError::ZeroLambda);
    }
    let mut nu = right_eigenvector(&m, lambda)?;

    // Paper normalization, then the canonical sign.
    let weight: f64 = (0..k).map(|i| pi[i] * nu[i] * nu[i]).sum();
    if weight <= 0.0 {
        return Err(SpectralError::NumericalFailure(format!(
            "degenerate eigenvector weight {weight}"
        )));
    }
    let scale = weight.sqrt().recip();
    for v in nu.iter_mut() {
        *v *= scale;
    }
    let mut argmax = 0;
    for i in 1..k {
        if nu[i].abs() > nu[argmax].abs() {
            argmax = i;
        }
    }
    if nu[argmax] < 0.0 {
        for v in nu.iter_mut() {
            *v = -*v;
        }
    }

    let sd = SpectralData {
        matrix: matrix.clone(),
        b,
        pi,
        lambda,
        nu,
        ks_product: b as f64 * lambda * lambda,
    };
    verify_invariants(&sd)?;
    Ok(sd)
}

/// Kesten-Stigum phase classification of `b*lambda^2` against 1.
pub fn classify_phase(sd: &SpectralData) -> Phase {
    if sd.ks_product > 1.0 + PHASE_TOL {
        Phase::KestenStigum
    } else if sd.ks_product < 1.0 - PHASE_TOL {
        Phase::SubCritical
    } else {
        Phase::Critical
    }
}

/// Infimum of admissible quadratic coefficients in the small-argument
/// moment bound: `||nu||_inf^2 / (2 b lambda^2) * (1 - 1/(b lambda^2))^-1`.
/// Any strictly larger value is a valid coefficient near zero.
pub fn cprime_lower_bound(sd: &SpectralData) -> Result<f64, SpectralError> {
    if classify_phase(sd) != Phase::KestenStigum {
        return Err(SpectralError::NotKestenStigum(sd.ks_product));
    }
    let ks = sd.ks_product;
    let ninf = sd.nu_inf_norm();
    Ok(ninf * ninf / (2.0 * ks) / (1.0 - 1.0 / ks))
}

/// Stationary distribution by dense elimination on `(M^T - I)` with the
/// normalization row `sum pi_i = 1` appended.
fn stationary_distribution(matrix: &ChannelMatrix) -> Result<Vec<f64>, SpectralError> {
    let k = matrix.k();
    // Augmented (k+1) x (k+1) system: columns 0..k unknowns, column k RHS.
    let mut a = vec![vec![0.0f64; k + 1]; k + 1];
    for i in 0..k {
        for j in 0..k {
            a[i][j] = matrix.row(j)[i] - if i == j { 1.0 } else { 0.0 };
        }
    }
    for j in 0..k {
        a[k][j] = 1.0;
    }
    a[k][k] = 1.0;

    // Elimination with partial pivoting over all k+1 rows; the leftover row
    // ends up as a ~0 residual because the system is consistent.
    for col in 0..k {
        let pivot = (col..=k)
            .max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs()))
            .unwrap();
        if a[pivot][col].abs() < 1e-14 {
            return Err(SpectralError::NumericalFailure(format!(
                "stationary solve: zero pivot in column {col}"
            )));
        }
        a.swap(col, pivot);
        for r in col + 1..=k {
            let f = a[r][col] / a[col][col];
            if f != 0.0 {
                for c in col..=k {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    let mut pi = vec![0.0f64; k];
    for row in (0..k).rev() {
        let mut v = a[row][k];
        for c in row + 1..k {
            v -= a[row][c] * pi[c];
        }
        pi[row] = v / a[row][row];
    }
    let total: f64 = pi.iter().sum();
    for p in pi.iter_mut() {
        *p /= total;
    }
    if pi.iter().any(|&p| p <= 0.0) {
        return Err(SpectralError::NumericalFailure(
            "stationary distribution has a non-positive entry".into(),
        ));
    }
    Ok(pi)
}

/// The second-largest-in-modulus eigenvalue, which must be real.
///
/// The Perron eigenvalue is the unique one closest to 1; among the rest the
/// top modulus must be attained by (numerically) one real value, otherwise
/// the channel is outside the model class and is rejected.
fn second_eigenvalue(m: &DMatrix<f64>) -> Result<f64, SpectralError> {
    let schur = nalgebra::linalg::Schur::try_new(m.clone(), EIGEN_EPS, EIGEN_MAX_ITER)
        .ok_or_else(|| SpectralError::NumericalFailure("Schur iteration did not converge".into()))?;
    let eig = schur.complex_eigenvalues();

    let mut perron = 0;
    for (i, e) in eig.iter().enumerate() {
        if (e - nalgebra::Complex::new(1.0, 0.0)).norm()
            < (eig[perron] - nalgebra::Complex::new(1.0, 0.0)).norm()
        {
            perron = i;
        }
    }
    let rest: Vec<nalgebra::Complex<f64>> = eig
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != perron)
        .map(|(_, e)| *e)
        .collect();

    let top = rest.iter().map(|e| e.norm()).fold(0.0f64, f64::max);
    let candidates: Vec<nalgebra::Complex<f64>> = rest
        .iter()
        .copied()
        .filter(|e| (e.norm() - top).abs() <= COMPLEX_TOL)
        .collect();
    for c in &candidates {
        if c.im.abs() > COMPLEX_TOL {
            return Err(SpectralError::ComplexSecondEigenvalue(format!(
                "eigenvalue {} + {}i at top modulus {top}",
                c.re, c.im
            )));
        }
    }
    let re_min = candidates.iter().map(|c| c.re).fold(f64::INFINITY, f64::min);
    let re_max = candidates
        .iter()
        .map(|c| c.re)
        .fold(f64::NEG_INFINITY, f64::max);
    if re_max - re_min > COMPLEX_TOL {
        return Err(SpectralError::ComplexSecondEigenvalue(format!(
            "distinct real eigenvalues {re_min} and {re_max} tie at modulus {top}"
        )));
    }
    Ok(re_max)
}

/// Right eigenvector via inverse iteration with a slightly shifted LU.
fn right_eigenvector(m: &DMatrix<f64>, lambda: f64) -> Result<Vec<f64>, SpectralError> {
    let k = m.nrows();
    // Shift keeps the factorization nonsingular; the offset is far below
    // the residual tolerance.
    let shift = lambda + 1e-13 * (1.0 + lambda.abs());
    let mut a = m.clone();
    for i in 0..k {
        a[(i, i)] -= shift;
    }
    let lu = a.lu();

    // Alternating start vector has a component on any sign-changing
    // eigenvector; the all-ones fallback covers the rest.
    let starts = [
        DVector::from_fn(k, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 }),
        DVector::from_fn(k, |i, _| 1.0 + i as f64 / k as f64),
    ];
    let mut best: Option<(f64, DVector<f64>)> = None;
    for start in starts {
        let mut v = start.normalize();
        for _ in 0..100 {
            let Some(mut y) = lu.solve(&v) else { break };
            let norm = y.norm();
            if !norm.is_finite() || norm == 0.0 {
                break;
            }
            y /= norm;
            let residual = (m * &y - lambda * &y).amax();
            let done = residual <= SPECTRAL_TOL * 1e-2;
            v = y;
            if done {
                break;
            }
        }
        let residual = (m * &v - lambda * &v).amax();
        if best.as_ref().map_or(true, |(r, _)| residual < *r) {
            best = Some((residual, v));
        }
        if best.as_ref().unwrap().0 <= SPECTRAL_TOL * 1e-2 {
            break;
        }
    }
    let (residual, v) = best.unwrap();
    if residual > SPECTRAL_TOL {
        return Err(SpectralError::NumericalFailure(format!(
            "inverse iteration residual {residual} for lambda {lambda}"
        )));
    }
    Ok(v.iter().copied().collect())
}

/// Re-check every SpectralData invariant; analyze refuses to hand out data
/// that fails any of them.
fn verify_invariants(sd: &SpectralData) -> Result<(), SpectralError> {
    let k = sd.k();
    let m = &sd.matrix;
    let fail = |what: String| Err(SpectralError::NumericalFailure(what));

    let mut pi_residual = 0.0f64;
    for j in 0..k {
        let mj: f64 = (0..k).map(|i| sd.pi[i] * m.row(i)[j]).sum();
        pi_residual = pi_residual.max((mj - sd.pi[j]).abs());
    }
    if pi_residual > SPECTRAL_TOL {
        return fail(format!("pi M = pi residual {pi_residual}"));
    }

    let mut nu_residual = 0.0f64;
    for i in 0..k {
        let mv: f64 = (0..k).map(|j| m.row(i)[j] * sd.nu[j]).sum();
        nu_residual = nu_residual.max((mv - sd.lambda * sd.nu[i]).abs());
    }
    if nu_residual > SPECTRAL_TOL {
        return fail(format!("M nu = lambda nu residual {nu_residual}"));
    }

    let dot: f64 = (0..k).map(|i| sd.pi[i] * sd.nu[i]).sum();
    if dot.abs() > SPECTRAL_TOL {
        return fail(format!("pi . nu = {dot}, expected 0"));
    }
    let norm: f64 = (0..k).map(|i| sd.pi[i] * sd.nu[i] * sd.nu[i]).sum();
    if (norm - 1.0).abs() > SPECTRAL_TOL {
        return fail(format!("sum pi nu^2 = {norm}, expected 1"));
    }
    Ok(())
}

/// Symmetric binary channel with flip probability `p`.
pub fn binary_symmetric_channel(p: f64) -> Result<ChannelMatrix, SpectralError> {
    validate_channel(vec![vec![1.0 - p, p], vec![p, 1.0 - p]])
}
