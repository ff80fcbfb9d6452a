//! Item arrival processes and their nonstationarity measures.
//!
//! Four processes are supported: i.i.d. draws from a base distribution, independent draws from
//! per-step corrupted distributions, a time-homogeneous finite Markov chain, and periodic blocks
//! where each block draws one item from each of `q` per-position distributions and then shuffles
//! the block uniformly.

use std::borrow::Cow;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market::{ItemSequence, MarketError, ReferenceDistribution};
use crate::rng::{rng_from_seed, stream_rng};

/// Iteration cap for power iteration.
pub const DEFAULT_POWER_ITERS: usize = 200_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("horizon must be at least 1, got {0}")]
    InvalidHorizon(usize),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("stationary distribution did not converge (residual {residual:e} after {iterations} iterations)")]
    NoConvergence { residual: f64, iterations: usize },
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error(transparent)]
    Market(#[from] MarketError),
}

/// Row-stochastic `m x m` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct TransitionMatrix {
    m: usize,
    data: Vec<f64>,
}

impl TransitionMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self, ModelError> {
        let m = rows.len();
        if m == 0 {
            return Err(ModelError::Invalid("empty transition matrix".into()));
        }
        let mut data = Vec::with_capacity(m * m);
        for (z, row) in rows.into_iter().enumerate() {
            if row.len() != m {
                return Err(ModelError::LengthMismatch(row.len(), m));
            }
            ReferenceDistribution::new(row.clone())
                .map_err(|e| ModelError::Invalid(format!("transition row {z}: {e}")))?;
            data.extend(row);
        }
        Ok(Self { m, data })
    }

    pub fn identity(m: usize) -> Self {
        let mut data = vec![0.0; m * m];
        for z in 0..m {
            data[z * m + z] = 1.0;
        }
        Self { m, data }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn row(&self, z: usize) -> &[f64] {
        &self.data[z * self.m..(z + 1) * self.m]
    }

    /// `p P` for a row vector `p`.
    pub fn left_apply(&self, p: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        for (z, &pz) in p.iter().enumerate() {
            if pz == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(z)) {
                *o += pz * a;
            }
        }
        out
    }

    fn as_matrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.m, self.m, &self.data)
    }

    /// True when every state reaches every other state.
    pub fn is_irreducible(&self) -> bool {
        let reach = |forward: bool| {
            let mut seen = vec![false; self.m];
            let mut stack = vec![0usize];
            seen[0] = true;
            while let Some(z) = stack.pop() {
                for y in 0..self.m {
                    let p = if forward { self.data[z * self.m + y] } else { self.data[y * self.m + z] };
                    if p > 0.0 && !seen[y] {
                        seen[y] = true;
                        stack.push(y);
                    }
                }
            }
            seen.into_iter().all(|s| s)
        };
        reach(true) && reach(false)
    }
}

impl TryFrom<Vec<Vec<f64>>> for TransitionMatrix {
    type Error = ModelError;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self, Self::Error> {
        Self::new(rows)
    }
}

impl From<TransitionMatrix> for Vec<Vec<f64>> {
    fn from(t: TransitionMatrix) -> Self {
        t.data.chunks_exact(t.m).map(<[f64]>::to_vec).collect()
    }
}

/// How the corrupted process perturbs its base distribution at step `tau` (1-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "schedule", rename_all = "lowercase")]
pub enum CorruptionSchedule {
    /// `s^tau = normalize(s^0 + (scale / tau) u_tau)` with `u_tau` uniform on `[0,1)^m`,
    /// drawn from the model seed's substream `tau`.
    Decaying { scale: f64 },
    /// `s^tau = (1 - lambda) s^0 + lambda e_corner` with `lambda = delta / (1 - s^0_corner)`, so
    /// every step sits at total variation exactly `delta` from `s^0`.
    Budgeted { delta: f64, corner: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ArrivalProcess {
    Iid {
        base: ReferenceDistribution,
    },
    Corrupted {
        base: ReferenceDistribution,
        #[serde(flatten)]
        schedule: CorruptionSchedule,
    },
    Markov {
        base: ReferenceDistribution,
        transition: TransitionMatrix,
    },
    Periodic {
        period_dists: Vec<ReferenceDistribution>,
    },
}

#[derive(Serialize, Deserialize)]
struct RawModel {
    #[serde(flatten)]
    process: ArrivalProcess,
    #[serde(default)]
    seed: u64,
}

/// A validated arrival process over `m` item types.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModel", into = "RawModel")]
pub struct InputModel {
    process: ArrivalProcess,
    seed: u64,
}

impl TryFrom<RawModel> for InputModel {
    type Error = ModelError;

    fn try_from(raw: RawModel) -> Result<Self, Self::Error> {
        Self::new(raw.process, raw.seed)
    }
}

impl From<InputModel> for RawModel {
    fn from(m: InputModel) -> Self {
        RawModel { process: m.process, seed: m.seed }
    }
}

/// Nonstationarity summary of a model over a horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonstationarityReport {
    /// `(1/t) sum_tau TV(Q^tau, reference)`.
    pub delta_avg: f64,
    /// `(iota, eps(iota))` pairs; Markov models only.
    pub epsilon_of_iota: Vec<(usize, f64)>,
    /// Block-wise deviation from the per-period average; periodic models only.
    pub delta_block: Option<f64>,
}

impl InputModel {
    pub fn new(process: ArrivalProcess, seed: u64) -> Result<Self, ModelError> {
        let m = match &process {
            ArrivalProcess::Iid { base } => base.len(),
            ArrivalProcess::Corrupted { base, schedule } => {
                match *schedule {
                    CorruptionSchedule::Decaying { scale } => {
                        if !(scale.is_finite() && scale >= 0.0) {
                            return Err(ModelError::Invalid(format!("decay scale {scale}")));
                        }
                    }
                    CorruptionSchedule::Budgeted { delta, corner } => {
                        if corner >= base.len() {
                            return Err(ModelError::Invalid(format!("corner {corner} out of range")));
                        }
                        let room = 1.0 - base.probs()[corner];
                        if !(delta >= 0.0 && (delta <= room || delta == 0.0)) {
                            return Err(ModelError::Invalid(format!(
                                "budget {delta} exceeds reachable distance {room} toward corner {corner}"
                            )));
                        }
                    }
                }
                base.len()
            }
            ArrivalProcess::Markov { base, transition } => {
                if base.len() != transition.m() {
                    return Err(ModelError::LengthMismatch(base.len(), transition.m()));
                }
                base.len()
            }
            ArrivalProcess::Periodic { period_dists } => {
                let first = period_dists
                    .first()
                    .ok_or_else(|| ModelError::Invalid("period length must be at least 1".into()))?;
                if let Some(d) = period_dists.iter().find(|d| d.len() != first.len()) {
                    return Err(ModelError::LengthMismatch(d.len(), first.len()));
                }
                first.len()
            }
        };
        if m == 0 {
            return Err(ModelError::Invalid("empty item universe".into()));
        }
        Ok(Self { process, seed })
    }

    pub fn iid(base: ReferenceDistribution) -> Self {
        Self { process: ArrivalProcess::Iid { base }, seed: 0 }
    }

    pub fn markov(base: ReferenceDistribution, transition: TransitionMatrix) -> Result<Self, ModelError> {
        Self::new(ArrivalProcess::Markov { base, transition }, 0)
    }

    pub fn periodic(period_dists: Vec<ReferenceDistribution>) -> Result<Self, ModelError> {
        Self::new(ArrivalProcess::Periodic { period_dists }, 0)
    }

    pub fn decaying(base: ReferenceDistribution, scale: f64, seed: u64) -> Result<Self, ModelError> {
        Self::new(
            ArrivalProcess::Corrupted { base, schedule: CorruptionSchedule::Decaying { scale } },
            seed,
        )
    }

    /// Budgeted corruption toward a corner drawn from `seed` among the items far enough from
    /// the base to absorb `delta`.
    pub fn budgeted(base: ReferenceDistribution, delta: f64, seed: u64) -> Result<Self, ModelError> {
        let eligible: Vec<usize> = (0..base.len()).filter(|&c| 1.0 - base.probs()[c] >= delta).collect();
        let corner = *eligible
            .choose(&mut rng_from_seed(seed))
            .ok_or_else(|| ModelError::Invalid(format!("no item can absorb corruption {delta}")))?;
        Self::new(
            ArrivalProcess::Corrupted { base, schedule: CorruptionSchedule::Budgeted { delta, corner } },
            seed,
        )
    }

    /// Random base distribution (uniform entries, normalized).
    pub fn random_distribution(m: usize, seed: u64) -> ReferenceDistribution {
        let mut rng = rng_from_seed(seed);
        random_simplex_point(m, &mut rng)
    }

    /// Dense random chain: rows of uniform entries, normalized. Strictly positive, hence
    /// irreducible and aperiodic.
    pub fn random_markov(m: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let base = random_simplex_point(m, &mut rng);
        let rows = (0..m).map(|_| random_simplex_point(m, &mut rng).into_inner()).collect();
        Self::markov(base, TransitionMatrix::new(rows).expect("normalized rows")).expect("consistent sizes")
    }

    pub fn random_periodic(m: usize, period: usize, seed: u64) -> Result<Self, ModelError> {
        Self::random_periodic_sharpened(m, period, seed, 1.0)
    }

    /// Per-position distributions with entries `U^sharpness`, normalized. `sharpness = 1` gives
    /// uniform entries; larger values concentrate each position on fewer items.
    pub fn random_periodic_sharpened(m: usize, period: usize, seed: u64, sharpness: f64) -> Result<Self, ModelError> {
        if !(sharpness > 0.0 && sharpness.is_finite()) {
            return Err(ModelError::Invalid(format!("sharpness must be positive, got {sharpness}")));
        }
        let mut rng = rng_from_seed(seed);
        let dists = (0..period)
            .map(|_| loop {
                let w: Vec<f64> = (0..m).map(|_| rng.gen::<f64>().powf(sharpness)).collect();
                if let Ok(d) = ReferenceDistribution::from_weights(w) {
                    break d;
                }
            })
            .collect();
        Self::periodic(dists)
    }

    pub fn process(&self) -> &ArrivalProcess {
        &self.process
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn kind(&self) -> &'static str {
        match self.process {
            ArrivalProcess::Iid { .. } => "iid",
            ArrivalProcess::Corrupted { .. } => "corrupted",
            ArrivalProcess::Markov { .. } => "markov",
            ArrivalProcess::Periodic { .. } => "periodic",
        }
    }

    /// Item-universe size.
    pub fn m(&self) -> usize {
        match &self.process {
            ArrivalProcess::Iid { base } | ArrivalProcess::Corrupted { base, .. } | ArrivalProcess::Markov { base, .. } => {
                base.len()
            }
            ArrivalProcess::Periodic { period_dists } => period_dists[0].len(),
        }
    }

    /// Distribution the long-run behavior is measured against: the base distribution for
    /// i.i.d./corrupted, the stationary distribution for Markov, the per-period average for
    /// periodic.
    pub fn reference(&self) -> Result<ReferenceDistribution, ModelError> {
        match &self.process {
            ArrivalProcess::Iid { base } | ArrivalProcess::Corrupted { base, .. } => Ok(base.clone()),
            ArrivalProcess::Markov { transition, .. } => {
                stationary_distribution(transition, 1e-13, DEFAULT_POWER_ITERS)
            }
            ArrivalProcess::Periodic { period_dists } => Ok(period_average(period_dists)),
        }
    }

    /// Marginal `Q^tau` (1-based) of an independent-across-steps process.
    fn independent_marginal(&self, tau: usize) -> Option<Cow<'_, [f64]>> {
        match &self.process {
            ArrivalProcess::Iid { base } => Some(Cow::Borrowed(base.probs())),
            ArrivalProcess::Corrupted { base, schedule } => Some(Cow::Owned(corrupted_step(base, schedule, self.seed, tau))),
            _ => None,
        }
    }
}

fn random_simplex_point<R: Rng>(m: usize, rng: &mut R) -> ReferenceDistribution {
    loop {
        let w: Vec<f64> = (0..m).map(|_| rng.gen::<f64>()).collect();
        if let Ok(d) = ReferenceDistribution::from_weights(w) {
            return d;
        }
    }
}

fn period_average(dists: &[ReferenceDistribution]) -> ReferenceDistribution {
    let m = dists[0].len();
    let mut avg = vec![0.0; m];
    for d in dists {
        for (a, p) in avg.iter_mut().zip(d.probs()) {
            *a += p;
        }
    }
    let q = dists.len() as f64;
    avg.iter_mut().for_each(|a| *a /= q);
    ReferenceDistribution::from_weights(avg).expect("average of distributions")
}

fn corrupted_step(base: &ReferenceDistribution, schedule: &CorruptionSchedule, seed: u64, tau: usize) -> Vec<f64> {
    let s0 = base.probs();
    match *schedule {
        CorruptionSchedule::Decaying { scale } => {
            let mut rng = stream_rng(seed, tau as u64);
            let eps = scale / tau as f64;
            let raw: Vec<f64> = s0.iter().map(|p| p + eps * rng.gen::<f64>()).collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / total).collect()
        }
        CorruptionSchedule::Budgeted { delta, corner } => {
            let room = 1.0 - s0[corner];
            let lambda = if delta == 0.0 { 0.0 } else { delta / room };
            let mut s: Vec<f64> = s0.iter().map(|p| (1.0 - lambda) * p).collect();
            s[corner] += lambda;
            s
        }
    }
}

/// Inverse-CDF sampler over a probability vector.
#[derive(Debug, Clone)]
pub struct Categorical {
    cdf: Vec<f64>,
    last_positive: usize,
}

impl Categorical {
    pub fn new(probs: &[f64]) -> Self {
        let mut acc = 0.0;
        let cdf = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        let last_positive = probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
        Self { cdf, last_positive }
    }

    /// Index `j` with `cdf[j-1] <= u < cdf[j]`; mass lost to rounding at the top goes to the
    /// last item with positive probability.
    pub fn sample_with(&self, u: f64) -> usize {
        let j = self.cdf.partition_point(|&c| c <= u);
        j.min(self.last_positive)
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        self.sample_with(rng.gen::<f64>())
    }
}

/// Draws `t` arrivals. Identical `(model, t, path_seed)` always gives the identical sequence.
pub fn sample_sequence(model: &InputModel, t: usize, path_seed: u64) -> Result<ItemSequence, ModelError> {
    if t < 1 {
        return Err(ModelError::InvalidHorizon(t));
    }
    let mut rng = rng_from_seed(path_seed);
    let mut items = Vec::with_capacity(t);
    match &model.process {
        ArrivalProcess::Iid { base } => {
            let c = Categorical::new(base.probs());
            items.extend((0..t).map(|_| c.sample(&mut rng)));
        }
        ArrivalProcess::Corrupted { base, schedule } => match schedule {
            CorruptionSchedule::Budgeted { .. } => {
                let c = Categorical::new(&corrupted_step(base, schedule, model.seed, 1));
                items.extend((0..t).map(|_| c.sample(&mut rng)));
            }
            CorruptionSchedule::Decaying { .. } => {
                for tau in 1..=t {
                    let c = Categorical::new(&corrupted_step(base, schedule, model.seed, tau));
                    items.push(c.sample(&mut rng));
                }
            }
        },
        ArrivalProcess::Markov { base, transition } => {
            let rows: Vec<Categorical> = (0..transition.m()).map(|z| Categorical::new(transition.row(z))).collect();
            let mut z = Categorical::new(base.probs()).sample(&mut rng);
            items.push(z);
            for _ in 1..t {
                z = rows[z].sample(&mut rng);
                items.push(z);
            }
        }
        ArrivalProcess::Periodic { period_dists } => {
            let samplers: Vec<Categorical> = period_dists.iter().map(|d| Categorical::new(d.probs())).collect();
            let mut block = Vec::with_capacity(samplers.len());
            while items.len() < t {
                block.clear();
                block.extend(samplers.iter().map(|c| c.sample(&mut rng)));
                block.shuffle(&mut rng);
                let take = (t - items.len()).min(block.len());
                items.extend_from_slice(&block[..take]);
            }
        }
    }
    Ok(ItemSequence::new(items)?)
}

/// Total variation distance `(1/2) sum_j |p_j - q_j|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64, ModelError> {
    if p.len() != q.len() {
        return Err(ModelError::LengthMismatch(p.len(), q.len()));
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

fn tv(p: &[f64], q: &[f64]) -> f64 {
    tv_distance(p, q).expect("equal lengths")
}

/// Stationary distribution by power iteration from the uniform vector, stopping once
/// `||pi P - pi||_1 <= tol`. Reducible chains are rejected up front since their stationary
/// distribution is not unique.
pub fn stationary_distribution(
    transition: &TransitionMatrix,
    tol: f64,
    max_iters: usize,
) -> Result<ReferenceDistribution, ModelError> {
    if !transition.is_irreducible() {
        return Err(ModelError::NoConvergence { residual: f64::NAN, iterations: 0 });
    }
    let m = transition.m();
    let mut pi = vec![1.0 / m as f64; m];
    let mut residual = f64::INFINITY;
    for it in 0..=max_iters {
        let next = transition.left_apply(&pi);
        residual = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        if residual <= tol {
            return Ok(ReferenceDistribution::from_weights(next)?);
        }
        if it == max_iters {
            break;
        }
        pi = next;
    }
    Err(ModelError::NoConvergence { residual, iterations: max_iters })
}

/// Walks the Markov marginals `Q^1 = base, Q^{tau+1} = Q^tau P` for `tau = 1..=t`, calling
/// `visit(tau, Q^tau)`. Once the marginal stops moving (L1 change below 1e-16) it is reused.
fn for_each_markov_marginal(
    base: &ReferenceDistribution,
    transition: &TransitionMatrix,
    t: usize,
    mut visit: impl FnMut(usize, &[f64]),
) {
    let mut q = base.probs().to_vec();
    let mut settled = false;
    for tau in 1..=t {
        visit(tau, &q);
        if !settled && tau < t {
            let next = transition.left_apply(&q);
            settled = next.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f64>() <= 1e-16;
            q = next;
        }
    }
}

/// Exact average marginal `(1/t) sum_tau Q^tau`.
pub fn average_marginal(model: &InputModel, t: usize) -> Result<ReferenceDistribution, ModelError> {
    if t < 1 {
        return Err(ModelError::InvalidHorizon(t));
    }
    let m = model.m();
    let mut acc = vec![0.0; m];
    match &model.process {
        ArrivalProcess::Iid { base } => return Ok(base.clone()),
        // The in-block shuffle gives every position the per-period average as its marginal.
        ArrivalProcess::Periodic { period_dists } => return Ok(period_average(period_dists)),
        ArrivalProcess::Corrupted { .. } => {
            for tau in 1..=t {
                let q = model.independent_marginal(tau).expect("independent");
                for (a, p) in acc.iter_mut().zip(q.iter()) {
                    *a += p;
                }
            }
        }
        ArrivalProcess::Markov { base, transition } => {
            for_each_markov_marginal(base, transition, t, |_, q| {
                for (a, p) in acc.iter_mut().zip(q) {
                    *a += p;
                }
            });
        }
    }
    Ok(ReferenceDistribution::from_weights(acc)?)
}

/// Nonstationarity measures of `model` over horizon `t`.
///
/// `delta_avg` averages the per-step TV distance of the marginals to the model reference.
/// For Markov chains, `eps(iota) = max_z TV(P^iota[z, .], pi)` from exact matrix powers.
/// For periodic models the horizon is cut into consecutive blocks of the period length and
/// `delta_block = (1/t) sum_k |I_k| TV(Pi, mean_{tau in I_k} Q^tau)`.
pub fn nonstationarity_report(
    model: &InputModel,
    t: usize,
    iota_grid: &[usize],
) -> Result<NonstationarityReport, ModelError> {
    if t < 1 {
        return Err(ModelError::InvalidHorizon(t));
    }
    let reference = model.reference()?;
    let r = reference.probs();
    let mut report = NonstationarityReport { delta_avg: 0.0, epsilon_of_iota: Vec::new(), delta_block: None };
    match &model.process {
        ArrivalProcess::Iid { .. } => {}
        ArrivalProcess::Corrupted { .. } => {
            let total: f64 = (1..=t).map(|tau| tv(&model.independent_marginal(tau).expect("independent"), r)).sum();
            report.delta_avg = total / t as f64;
        }
        ArrivalProcess::Markov { base, transition } => {
            let mut total = 0.0;
            for_each_markov_marginal(base, transition, t, |_, q| total += tv(q, r));
            report.delta_avg = total / t as f64;

            let mut grid: Vec<usize> = iota_grid.to_vec();
            grid.sort_unstable();
            grid.dedup();
            let p = transition.as_matrix();
            let mut power = nalgebra::DMatrix::<f64>::identity(transition.m(), transition.m());
            let mut reached = 0;
            for iota in grid {
                while reached < iota {
                    power = &power * &p;
                    reached += 1;
                }
                let eps = (0..transition.m())
                    .map(|z| {
                        let row: Vec<f64> = power.row(z).iter().copied().collect();
                        tv(&row, r)
                    })
                    .fold(0.0, f64::max);
                report.epsilon_of_iota.push((iota, eps));
            }
        }
        ArrivalProcess::Periodic { period_dists } => {
            // Every position's marginal is the per-period average, so each block average is too.
            let q = period_dists.len();
            let marginal = period_average(period_dists);
            let mut total = 0.0;
            let mut start = 0;
            while start < t {
                let len = q.min(t - start);
                total += len as f64 * tv(r, marginal.probs());
                start += len;
            }
            report.delta_block = Some(total / t as f64);
        }
    }
    Ok(report)
}
