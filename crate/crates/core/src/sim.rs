//! Streaming Monte Carlo for the broadcast process on the b-ary tree.
//!
//! Each replica walks its tree depth-first, drawing child states edge by
//! edge and folding leaves into a census and a compensated sigma sum, so
//! memory per replica is O(n + k) no matter how many leaves the tree has.
//! Batches are data-parallel over replica indices with a fixed chunk
//! decomposition: chunk partials are merged in chunk order, which makes
//! batch output a pure function of the spec — the thread count and the
//! `parallel` feature flag never change a single bit.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::KahanSum;
use crate::rng::replica_rng;
use crate::spectral::SpectralData;

/// Hard cap on the tree depth.
pub const MAX_LEVEL: u32 = 24;
/// Hard cap on `replicas * b^n` for one batch.
pub const LEAF_BUDGET: u128 = 1 << 40;
/// Replicas per work chunk; fixed so the merge tree is identical for any
/// worker count.
const CHUNK: u64 = 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("level n={n} exceeds the supported maximum {max}")]
    LevelTooDeep { n: u32, max: u32 },
    #[error("a batch needs at least one replica")]
    NoReplicas,
    #[error("fixed root state {state} out of range for k={k}")]
    InvalidRootState { state: usize, k: usize },
    #[error("budget exceeded: {total_leaves} leaves requested > {budget}")]
    BudgetExceeded { total_leaves: u128, budget: u128 },
    #[error("zeta grid contains a non-finite value {0}")]
    NonFiniteZeta(f64),
}

/// How the root state of each replica is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RootCondition {
    /// Draw from the stationary distribution.
    Stationary,
    /// Condition on one root state (0-based).
    FixedState(usize),
}

/// A validated simulation request.
#[derive(Debug, Clone)]
pub struct SimSpec {
    sd: SpectralData,
    n: u32,
    root: RootCondition,
    replicas: u64,
    master_seed: u64,
}

impl SimSpec {
    pub fn new(
        sd: SpectralData,
        n: u32,
        root: RootCondition,
        replicas: u64,
        master_seed: u64,
    ) -> Result<Self, SimError> {
        if n > MAX_LEVEL {
            return Err(SimError::LevelTooDeep { n, max: MAX_LEVEL });
        }
        if replicas == 0 {
            return Err(SimError::NoReplicas);
        }
        if let RootCondition::FixedState(i) = root {
            if i >= sd.k() {
                return Err(SimError::InvalidRootState { state: i, k: sd.k() });
            }
        }
        if (sd.b as u128).pow(n) > LEAF_BUDGET {
            return Err(SimError::BudgetExceeded {
                total_leaves: (sd.b as u128).pow(n),
                budget: LEAF_BUDGET,
            });
        }
        Ok(Self {
            sd,
            n,
            root,
            replicas,
            master_seed,
        })
    }

    pub fn sd(&self) -> &SpectralData {
        &self.sd
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn root_condition(&self) -> RootCondition {
        self.root
    }

    pub fn replicas(&self) -> u64 {
        self.replicas
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    /// `b^n`, the number of leaves of one replica tree.
    pub fn leaf_count(&self) -> u64 {
        (self.sd.b as u64).pow(self.n)
    }

    /// `(b lambda^2)^{n/2}`, the factor turning `S_n` into `Q_n`.
    pub fn q_scale(&self) -> f64 {
        self.sd.ks_product.powf(self.n as f64 / 2.0)
    }
}

/// One simulated realization.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicaResult {
    pub root_state: usize,
    /// The linear estimator `(b lambda)^{-n} sum sigma_x`.
    pub s_n: f64,
    /// `(b lambda^2)^{n/2} S_n`.
    pub q_n: f64,
    /// Leaf-state counts; sums to `b^n`.
    pub census: Vec<u64>,
}

/// Inverse-CDF tables for root and edge draws.
pub(crate) struct ChannelSampler {
    k: usize,
    b: u32,
    nu: Vec<f64>,
    pi_cdf: Vec<f64>,
    row_cdf: Vec<Vec<f64>>,
}

impl ChannelSampler {
    pub(crate) fn new(sd: &SpectralData) -> Self {
        let k = sd.k();
        let cdf_of = |weights: &[f64]| {
            let mut acc = 0.0;
            let mut cdf: Vec<f64> = weights
                .iter()
                .map(|w| {
                    acc += w;
                    acc
                })
                .collect();
            cdf[k - 1] = 1.0;
            cdf
        };
        ChannelSampler {
            k,
            b: sd.b,
            nu: sd.nu.clone(),
            pi_cdf: cdf_of(&sd.pi),
            row_cdf: (0..k).map(|i| cdf_of(sd.matrix.row(i))).collect(),
        }
    }

    #[inline]
    fn pick(cdf: &[f64], u: f64) -> usize {
        cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1)
    }

    #[inline]
    fn draw_root(&self, rng: &mut ChaCha8Rng, root: RootCondition) -> usize {
        match root {
            RootCondition::FixedState(i) => i,
            RootCondition::Stationary => Self::pick(&self.pi_cdf, rng.random()),
        }
    }

    #[inline]
    fn draw_child(&self, rng: &mut ChaCha8Rng, state: usize) -> usize {
        Self::pick(&self.row_cdf[state], rng.random())
    }
}

/// Receives each leaf of the depth-first walk in canonical order.
pub(crate) trait LeafSink {
    fn leaf(&mut self, state: usize, sigma: f64);
}

pub(crate) struct Tally {
    pub census: Vec<u64>,
    pub sigma_sum: KahanSum,
}

impl Tally {
    pub(crate) fn new(k: usize) -> Self {
        Tally {
            census: vec![0; k],
            sigma_sum: KahanSum::new(),
        }
    }
}

impl LeafSink for Tally {
    #[inline]
    fn leaf(&mut self, state: usize, sigma: f64) {
        self.census[state] += 1;
        self.sigma_sum.add(sigma);
    }
}

/// Depth-first broadcast below a node with the given state. Recursion depth
/// is at most `MAX_LEVEL`.
pub(crate) fn broadcast_dfs<S: LeafSink>(
    sampler: &ChannelSampler,
    rng: &mut ChaCha8Rng,
    depth_left: u32,
    state: usize,
    sink: &mut S,
) {
    if depth_left == 0 {
        sink.leaf(state, sampler.nu[state]);
        return;
    }
    for _ in 0..sampler.b {
        let child = sampler.draw_child(rng, state);
        broadcast_dfs(sampler, rng, depth_left - 1, child, sink);
    }
}

pub(crate) fn root_rng_and_state(
    sampler: &ChannelSampler,
    master_seed: u64,
    replica_index: u64,
    root: RootCondition,
) -> (ChaCha8Rng, usize) {
    let mut rng = replica_rng(master_seed, replica_index);
    let state = sampler.draw_root(&mut rng, root);
    (rng, state)
}

/// Draw one replica. Deterministic in `(spec.master_seed, replica_index)`.
pub fn sample_replica(spec: &SimSpec, replica_index: u64) -> ReplicaResult {
    assert!(
        replica_index < spec.replicas,
        "replica index {replica_index} out of range"
    );
    let sampler = ChannelSampler::new(&spec.sd);
    sample_replica_with(&sampler, spec, replica_index)
}

fn sample_replica_with(
    sampler: &ChannelSampler,
    spec: &SimSpec,
    replica_index: u64,
) -> ReplicaResult {
    let (mut rng, root_state) =
        root_rng_and_state(sampler, spec.master_seed, replica_index, spec.root);
    let mut tally = Tally::new(sampler.k);
    broadcast_dfs(sampler, &mut rng, spec.n, root_state, &mut tally);
    let s_n = tally.sigma_sum.value() / spec.sd.b_lambda().powi(spec.n as i32);
    ReplicaResult {
        root_state,
        s_n,
        q_n: spec.q_scale() * s_n,
        census: tally.census,
    }
}

/// Empirical MGF of `S_n` at one grid point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MgfEstimate {
    pub zeta: f64,
    pub value: f64,
    pub std_error: f64,
}

/// Per-root-state statistics of one batch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RootStateSummary {
    pub root_state: usize,
    pub count: u64,
    pub mean_s: f64,
    pub var_s: f64,
    pub se_mean_s: f64,
    pub mean_q: f64,
    pub var_q: f64,
    pub se_mean_q: f64,
    pub skewness_q: f64,
    pub excess_kurtosis_q: f64,
    /// Set when fewer than two replicas hit this root state, in which case
    /// the variance estimate is pinned to zero.
    pub degenerate_variance: bool,
    pub mgf: Vec<MgfEstimate>,
}

/// Exact-merge batch statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchSummary {
    pub n: u32,
    pub replicas: u64,
    pub master_seed: u64,
    pub zeta_grid: Vec<f64>,
    pub q_scale: f64,
    /// One entry per root state that occurred, in state order.
    pub per_root_state: Vec<RootStateSummary>,
    /// Leaf-state counts pooled over all replicas.
    pub pooled_census: Vec<u64>,
}

struct StateAcc {
    count: u64,
    s1: KahanSum,
    s2: KahanSum,
    s3: KahanSum,
    s4: KahanSum,
    exp_z: Vec<KahanSum>,
    exp_2z: Vec<KahanSum>,
}

impl StateAcc {
    fn new(zlen: usize) -> Self {
        StateAcc {
            count: 0,
            s1: KahanSum::new(),
            s2: KahanSum::new(),
            s3: KahanSum::new(),
            s4: KahanSum::new(),
            exp_z: vec![KahanSum::new(); zlen],
            exp_2z: vec![KahanSum::new(); zlen],
        }
    }

    fn merge(&mut self, other: &StateAcc) {
        self.count += other.count;
        self.s1.merge(other.s1);
        self.s2.merge(other.s2);
        self.s3.merge(other.s3);
        self.s4.merge(other.s4);
        for (a, b) in self.exp_z.iter_mut().zip(&other.exp_z) {
            a.merge(*b);
        }
        for (a, b) in self.exp_2z.iter_mut().zip(&other.exp_2z) {
            a.merge(*b);
        }
    }
}

struct BatchAcc {
    states: Vec<StateAcc>,
    census: Vec<u64>,
}

impl BatchAcc {
    fn new(k: usize, zlen: usize) -> Self {
        BatchAcc {
            states: (0..k).map(|_| StateAcc::new(zlen)).collect(),
            census: vec![0; k],
        }
    }

    fn record(&mut self, r: &ReplicaResult, zetas: &[f64]) {
        let acc = &mut self.states[r.root_state];
        acc.count += 1;
        let s = r.s_n;
        acc.s1.add(s);
        acc.s2.add(s * s);
        acc.s3.add(s * s * s);
        acc.s4.add(s * s * s * s);
        for (zi, &z) in zetas.iter().enumerate() {
            let e = (z * s).exp();
            acc.exp_z[zi].add(e);
            acc.exp_2z[zi].add(e * e);
        }
        for (c, &z) in self.census.iter_mut().zip(&r.census) {
            *c += z;
        }
    }

    fn merge(&mut self, other: &BatchAcc) {
        for (a, b) in self.states.iter_mut().zip(&other.states) {
            a.merge(b);
        }
        for (a, b) in self.census.iter_mut().zip(&other.census) {
            *a += b;
        }
    }
}

fn chunk_bounds(total: u64) -> Vec<(u64, u64)> {
    (0..total.div_ceil(CHUNK))
        .map(|c| (c * CHUNK, ((c + 1) * CHUNK).min(total)))
        .collect()
}

fn batch_chunk(spec: &SimSpec, sampler: &ChannelSampler, lo: u64, hi: u64, zetas: &[f64]) -> BatchAcc {
    let mut acc = BatchAcc::new(spec.sd.k(), zetas.len());
    for r in lo..hi {
        let rep = sample_replica_with(sampler, spec, r);
        acc.record(&rep, zetas);
    }
    acc
}

fn validate_batch(spec: &SimSpec, zeta_grid: &[f64]) -> Result<(), SimError> {
    for &z in zeta_grid {
        if !z.is_finite() {
            return Err(SimError::NonFiniteZeta(z));
        }
    }
    let total_leaves = spec.replicas as u128 * (spec.sd.b as u128).pow(spec.n);
    if total_leaves > LEAF_BUDGET {
        return Err(SimError::BudgetExceeded {
            total_leaves,
            budget: LEAF_BUDGET,
        });
    }
    Ok(())
}

/// Run a batch on the sequential fallback path.
pub fn run_batch_seq(spec: &SimSpec, zeta_grid: &[f64]) -> Result<BatchSummary, SimError> {
    validate_batch(spec, zeta_grid)?;
    let sampler = ChannelSampler::new(&spec.sd);
    let mut total = BatchAcc::new(spec.sd.k(), zeta_grid.len());
    for (lo, hi) in chunk_bounds(spec.replicas) {
        let acc = batch_chunk(spec, &sampler, lo, hi, zeta_grid);
        total.merge(&acc);
    }
    Ok(summarize(spec, zeta_grid, total))
}

/// Run a batch, data-parallel over replica chunks when the `parallel`
/// feature is enabled. Output is bit-identical to [`run_batch_seq`].
#[cfg(feature = "parallel")]
pub fn run_batch(spec: &SimSpec, zeta_grid: &[f64]) -> Result<BatchSummary, SimError> {
    validate_batch(spec, zeta_grid)?;
    let sampler = ChannelSampler::new(&spec.sd);
    let accs: Vec<BatchAcc> = chunk_bounds(spec.replicas)
        .into_par_iter()
        .map(|(lo, hi)| batch_chunk(spec, &sampler, lo, hi, zeta_grid))
        .collect();
    let mut total = BatchAcc::new(spec.sd.k(), zeta_grid.len());
    for acc in &accs {
        total.merge(acc);
    }
    Ok(summarize(spec, zeta_grid, total))
}

#[cfg(not(feature = "parallel"))]
pub fn run_batch(spec: &SimSpec, zeta_grid: &[f64]) -> Result<BatchSummary, SimError> {
    run_batch_seq(spec, zeta_grid)
}

fn summarize(spec: &SimSpec, zeta_grid: &[f64], acc: BatchAcc) -> BatchSummary {
    let q_scale = spec.q_scale();
    let mut per_root_state = Vec::new();
    for (state, sa) in acc.states.iter().enumerate() {
        if sa.count == 0 {
            continue;
        }
        let c = sa.count as f64;
        let mean = sa.s1.value() / c;
        let raw2 = sa.s2.value() / c;
        let raw3 = sa.s3.value() / c;
        let raw4 = sa.s4.value() / c;
        let m2 = (raw2 - mean * mean).max(0.0);
        let m3 = raw3 - 3.0 * mean * raw2 + 2.0 * mean.powi(3);
        let m4 = raw4 - 4.0 * mean * raw3 + 6.0 * mean * mean * raw2 - 3.0 * mean.powi(4);
        let degenerate = sa.count < 2;
        let var = if degenerate { 0.0 } else { m2 * c / (c - 1.0) };
        let se_mean = (var / c).sqrt();
        let skew = m3 / m2.powf(1.5);
        let exkurt = m4 / (m2 * m2) - 3.0;

        let mgf = zeta_grid
            .iter()
            .enumerate()
            .map(|(zi, &z)| {
                let value = sa.exp_z[zi].value() / c;
                let var_e = (sa.exp_2z[zi].value() / c - value * value).max(0.0);
                MgfEstimate {
                    zeta: z,
                    value,
                    std_error: if degenerate { 0.0 } else { (var_e / c).sqrt() },
                }
            })
            .collect();

        per_root_state.push(RootStateSummary {
            root_state: state,
            count: sa.count,
            mean_s: mean,
            var_s: var,
            se_mean_s: se_mean,
            mean_q: q_scale * mean,
            var_q: q_scale * q_scale * var,
            se_mean_q: q_scale * se_mean,
            skewness_q: skew,
            excess_kurtosis_q: exkurt,
            degenerate_variance: degenerate,
            mgf,
        });
    }
    BatchSummary {
        n: spec.n,
        replicas: spec.replicas,
        master_seed: spec.master_seed,
        zeta_grid: zeta_grid.to_vec(),
        q_scale,
        per_root_state,
        pooled_census: acc.census,
    }
}

/// Pooled leaf-state frequencies against the stationary distribution.
#[derive(Debug, Clone, Serialize)]
pub struct CensusCheck {
    /// False when the batch conditioned on a fixed root state, in which
    /// case leaf marginals are not stationary and the check does not apply.
    pub applicable: bool,
    pub empirical: Vec<f64>,
    pub expected: Vec<f64>,
    pub max_abs_deviation: f64,
}

pub fn census_distribution_check(spec: &SimSpec, batch: &BatchSummary) -> CensusCheck {
    let expected = spec.sd.pi.clone();
    let applicable = spec.root == RootCondition::Stationary;
    let total = (batch.replicas as f64) * (spec.leaf_count() as f64);
    let empirical: Vec<f64> = batch
        .pooled_census
        .iter()
        .map(|&c| c as f64 / total)
        .collect();
    let max_abs_deviation = if applicable {
        empirical
            .iter()
            .zip(&expected)
            .map(|(e, p)| (e - p).abs())
            .fold(0.0, f64::max)
    } else {
        f64::NAN
    };
    CensusCheck {
        applicable,
        empirical,
        expected,
        max_abs_deviation,
    }
}

/// Monte Carlo estimate of `E[e^{zeta S_n^2}]` with its standard error.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SquareMgfMc {
    pub zeta: f64,
    pub value: f64,
    pub std_error: f64,
}

struct SquareAcc {
    count: u64,
    e1: KahanSum,
    e2: KahanSum,
}

fn square_chunk(spec: &SimSpec, sampler: &ChannelSampler, lo: u64, hi: u64, zeta: f64) -> SquareAcc {
    let mut acc = SquareAcc {
        count: 0,
        e1: KahanSum::new(),
        e2: KahanSum::new(),
    };
    for r in lo..hi {
        let rep = sample_replica_with(sampler, spec, r);
        let e = (zeta * rep.s_n * rep.s_n).exp();
        acc.count += 1;
        acc.e1.add(e);
        acc.e2.add(e * e);
    }
    acc
}

pub fn empirical_square_mgf(spec: &SimSpec, zeta: f64) -> Result<SquareMgfMc, SimError> {
    if !zeta.is_finite() {
        return Err(SimError::NonFiniteZeta(zeta));
    }
    validate_batch(spec, &[])?;
    let sampler = ChannelSampler::new(&spec.sd);
    let bounds = chunk_bounds(spec.replicas);

    #[cfg(feature = "parallel")]
    let accs: Vec<SquareAcc> = bounds
        .into_par_iter()
        .map(|(lo, hi)| square_chunk(spec, &sampler, lo, hi, zeta))
        .collect();
    #[cfg(not(feature = "parallel"))]
    let accs: Vec<SquareAcc> = bounds
        .into_iter()
        .map(|(lo, hi)| square_chunk(spec, &sampler, lo, hi, zeta))
        .collect();

    let mut count = 0u64;
    let mut e1 = KahanSum::new();
    let mut e2 = KahanSum::new();
    for acc in &accs {
        count += acc.count;
        e1.merge(acc.e1);
        e2.merge(acc.e2);
    }
    let c = count as f64;
    let value = e1.value() / c;
    let var = (e2.value() / c - value * value).max(0.0);
    Ok(SquareMgfMc {
        zeta,
        value,
        std_error: if count < 2 { 0.0 } else { (var / c).sqrt() },
    })
}
