//! Box-constrained Eisenberg-Gale dual
//!
//! ```text
//! min_{lo <= beta <= hi}  D(beta) = sum_j w_j max_i beta_i v_ij - (1/n) sum_i log beta_i
//! ```
//!
//! over a finite item support with weights `w` (empirical frequencies for the hindsight problem,
//! a reference distribution for the underlying one).
//!
//! The max is replaced by a log-sum-exp with temperature `mu`, which makes the objective smooth
//! and strictly convex, and the smoothed problem is solved by projected Newton. `mu` is driven
//! toward zero geometrically, warm-starting each stage. At the end the softmax weights give a
//! feasible fractional allocation `x`, and
//!
//! ```text
//! L(x) = sum_i min_{lo <= b <= hi} (b u_i(x) - (1/n) log b),   u_i(x) = sum_j w_j v_ij x_ij
//! ```
//!
//! is a lower bound on the box-constrained optimum, since `max_i beta_i v_ij >= sum_i x_ij beta_i v_ij`
//! for every `beta`. The reported residual is the duality gap `D(beta) - L(x) >= D(beta) - D*`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market::{ItemSequence, MarketInstance, ReferenceDistribution, ValuationMatrix, PROB_TOL};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITERS: usize = 200_000;

/// Softmax weights below `exp(-SOFTMAX_CUTOFF)` are treated as zero.
const SOFTMAX_CUTOFF: f64 = 45.0;
const MU_SHRINK: f64 = 0.1;
const MU_START: f64 = 0.1;
const MU_FLOOR: f64 = 1e-13;
const ARMIJO: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EgError {
    #[error("beta[{index}] = {value} must be strictly positive")]
    NonpositiveBeta { index: usize, value: f64 },
    #[error("agent {0} has zero value on the weighted item support")]
    ZeroWeightedValue(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("dual solve did not converge: residual {residual:e} after {iterations} iterations")]
    NoConvergence { residual: f64, iterations: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualProblem {
    pub valuations: ValuationMatrix,
    pub weights: Vec<f64>,
    pub lo: f64,
    pub hi: f64,
}

impl DualProblem {
    pub fn new(valuations: ValuationMatrix, weights: Vec<f64>, lo: f64, hi: f64) -> Result<Self, EgError> {
        if weights.len() != valuations.m() {
            return Err(EgError::DimensionMismatch(format!(
                "{} weights for {} items",
                weights.len(),
                valuations.m()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(EgError::Invalid("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(EgError::Invalid(format!("weights sum to {total}")));
        }
        if !(lo > 0.0 && hi > lo && hi.is_finite()) {
            return Err(EgError::Invalid(format!("box [{lo}, {hi}]")));
        }
        Ok(Self { valuations, weights, lo, hi })
    }

    /// Problem over the pacing box `[1/((1+delta0) n), 1+delta0]`.
    pub fn with_delta0(valuations: ValuationMatrix, weights: &ReferenceDistribution, delta0: f64) -> Result<Self, EgError> {
        let n = valuations.n() as f64;
        Self::new(valuations, weights.probs().to_vec(), 1.0 / ((1.0 + delta0) * n), 1.0 + delta0)
    }

    pub fn n(&self) -> usize {
        self.valuations.n()
    }

    fn support(&self) -> Vec<(f64, Vec<f64>)> {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(j, &w)| (w, self.valuations.item_column(j)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualSolution {
    #[serde(rename = "beta")]
    pub beta_hat: Vec<f64>,
    pub objective: f64,
    /// Duality gap certificate, an upper bound on `objective - optimum`.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl DualSolution {
    /// Turns a non-converged solve into an error.
    pub fn require_converged(self) -> Result<Self, EgError> {
        if self.converged {
            Ok(self)
        } else {
            Err(EgError::NoConvergence { residual: self.residual, iterations: self.iterations })
        }
    }
}

/// `D(beta) = sum_j w_j max_i beta_i v_ij - (1/n) sum_i log beta_i`.
pub fn dual_objective(beta: &[f64], prob: &DualProblem) -> Result<f64, EgError> {
    if beta.len() != prob.n() {
        return Err(EgError::DimensionMismatch(format!("{} multipliers for {} agents", beta.len(), prob.n())));
    }
    if let Some((index, &value)) = beta.iter().enumerate().find(|(_, b)| !(**b > 0.0)) {
        return Err(EgError::NonpositiveBeta { index, value });
    }
    let v = &prob.valuations;
    let mut total = 0.0;
    for (j, &w) in prob.weights.iter().enumerate() {
        if w > 0.0 {
            let best = (0..v.n()).map(|i| beta[i] * v.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
            total += w * best;
        }
    }
    Ok(total - beta.iter().map(|b| b.ln()).sum::<f64>() / v.n() as f64)
}

/// Average equilibrium utilities `u_i = 1/(n beta_i)`.
pub fn equilibrium_utilities(sol: &DualSolution, n: usize) -> Vec<f64> {
    sol.beta_hat.iter().map(|b| 1.0 / (n as f64 * b)).collect()
}

/// Smoothed objective and its derivatives at one point.
struct Smoothed {
    value: f64,
    grad: Vec<f64>,
    /// Per-agent utility `sum_j w_j v_ij x_ij` under the softmax allocation.
    utilities: Vec<f64>,
}

struct Smoother<'a> {
    support: &'a [(f64, Vec<f64>)],
    n: usize,
}

impl Smoother<'_> {
    /// Calls `visit(weight, values, active)` per item with the active softmax entries
    /// `(agent, x_ij)`; returns the smoothed max term.
    fn for_each_item(&self, beta: &[f64], mu: f64, mut visit: impl FnMut(f64, &[f64], &[(usize, f64)])) -> f64 {
        let mut total = 0.0;
        let mut active: Vec<(usize, f64)> = Vec::with_capacity(self.n);
        for (w, col) in self.support {
            let best = beta.iter().zip(col).map(|(b, v)| b * v).fold(f64::NEG_INFINITY, f64::max);
            active.clear();
            let mut z = 0.0;
            for (i, (b, v)) in beta.iter().zip(col).enumerate() {
                let s = (b * v - best) / mu;
                if s > -SOFTMAX_CUTOFF {
                    let e = s.exp();
                    z += e;
                    active.push((i, e));
                }
            }
            for a in active.iter_mut() {
                a.1 /= z;
            }
            total += w * (best + mu * z.ln());
            visit(*w, col, &active);
        }
        total
    }

    fn value(&self, beta: &[f64], mu: f64) -> f64 {
        self.for_each_item(beta, mu, |_, _, _| {}) - barrier(beta, self.n)
    }

    fn eval(&self, beta: &[f64], mu: f64) -> Smoothed {
        let mut utilities = vec![0.0; self.n];
        let max_term = self.for_each_item(beta, mu, |w, col, active| {
            for &(i, x) in active {
                utilities[i] += w * col[i] * x;
            }
        });
        let grad = utilities.iter().zip(beta).map(|(u, b)| u - 1.0 / (self.n as f64 * b)).collect();
        Smoothed { value: max_term - barrier(beta, self.n), grad, utilities }
    }

    fn hessian(&self, beta: &[f64], mu: f64) -> DMatrix<f64> {
        let n = self.n;
        let mut h = DMatrix::<f64>::zeros(n, n);
        self.for_each_item(beta, mu, |w, col, active| {
            let c = w / mu;
            for &(i, xi) in active {
                let ai = col[i] * xi;
                h[(i, i)] += c * col[i] * ai;
                for &(k, xk) in active {
                    h[(i, k)] -= c * ai * col[k] * xk;
                }
            }
        });
        for (i, b) in beta.iter().enumerate() {
            h[(i, i)] += 1.0 / (n as f64 * b * b);
        }
        h
    }
}

fn barrier(beta: &[f64], n: usize) -> f64 {
    beta.iter().map(|b| b.ln()).sum::<f64>() / n as f64
}

/// `sum_i min_{lo<=b<=hi} (b u_i - (1/n) log b)`.
fn lagrangian_lower_bound(utilities: &[f64], n: usize, lo: f64, hi: f64) -> f64 {
    let nf = n as f64;
    utilities
        .iter()
        .map(|&u| {
            let b = if u > 0.0 { (1.0 / (nf * u)).clamp(lo, hi) } else { hi };
            b * u - b.ln() / nf
        })
        .sum()
}

fn solve_spd(h: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let scale = (0..h.nrows()).map(|i| h[(i, i)].abs()).fold(0.0, f64::max).max(1.0);
    let mut shift = 0.0;
    loop {
        let mut m = h.clone();
        if shift > 0.0 {
            for i in 0..m.nrows() {
                m[(i, i)] += shift;
            }
        }
        if let Some(ch) = m.cholesky() {
            return ch.solve(rhs);
        }
        shift = if shift == 0.0 { 1e-14 * scale } else { shift * 10.0 };
    }
}

/// One projected-Newton stage at temperature `mu`. Returns the number of iterations used.
fn newton_stage(sm: &Smoother<'_>, beta: &mut [f64], mu: f64, lo: f64, hi: f64, budget: usize) -> usize {
    let n = beta.len();
    let mut iters = 0;
    while iters < budget {
        iters += 1;
        let cur = sm.eval(beta, mu);
        let eps_bound = 1e-12 * (hi - lo);
        let free: Vec<usize> = (0..n)
            .filter(|&i| {
                let at_lo = beta[i] <= lo + eps_bound && cur.grad[i] > 0.0;
                let at_hi = beta[i] >= hi - eps_bound && cur.grad[i] < 0.0;
                !(at_lo || at_hi)
            })
            .collect();
        if free.is_empty() {
            break;
        }
        let h = sm.hessian(beta, mu);
        let hf = DMatrix::from_fn(free.len(), free.len(), |a, b| h[(free[a], free[b])]);
        let gf = DVector::from_iterator(free.len(), free.iter().map(|&i| cur.grad[i]));
        let d = solve_spd(&hf, &(-&gf));
        let decrement = -gf.dot(&d);
        if !(decrement > 0.0) || decrement < 1e-24 {
            break;
        }

        let grad_norm = gf.amax();
        let mut alpha = 1.0;
        let mut accepted = false;
        let mut trial = beta.to_vec();
        for _ in 0..60 {
            for (a, &i) in free.iter().enumerate() {
                trial[i] = (beta[i] + alpha * d[a]).clamp(lo, hi);
            }
            let moved: f64 = free.iter().map(|&i| cur.grad[i] * (trial[i] - beta[i])).sum();
            let f_new = sm.value(&trial, mu);
            if f_new <= cur.value + ARMIJO * moved {
                accepted = true;
                break;
            }
            // Near the optimum the objective stops resolving progress; accept full steps
            // that shrink the free gradient instead.
            if alpha == 1.0 {
                let g_new = sm.eval(&trial, mu).grad;
                let new_norm = free.iter().map(|&i| g_new[i].abs()).fold(0.0, f64::max);
                if new_norm < 0.5 * grad_norm && (f_new - cur.value).abs() <= 1e-12 * cur.value.abs().max(1.0) {
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
        let step = free.iter().map(|&i| (trial[i] - beta[i]).abs()).fold(0.0, f64::max);
        beta.copy_from_slice(&trial);
        if step <= 1e-15 * hi || decrement < 1e-22 {
            break;
        }
    }
    iters
}

/// Solves the box-constrained dual. See the module docs for the method and the residual.
pub fn solve_dual(prob: &DualProblem, tol: f64, max_iters: usize) -> Result<DualSolution, EgError> {
    let n = prob.n();
    let support = prob.support();
    let mut mean_value = vec![0.0; n];
    for (w, col) in &support {
        for (mv, v) in mean_value.iter_mut().zip(col) {
            *mv += w * v;
        }
    }
    if let Some(i) = mean_value.iter().position(|&mv| !(mv > 0.0)) {
        return Err(EgError::ZeroWeightedValue(i));
    }
    let (lo, hi) = (prob.lo, prob.hi);
    // proportional-share multipliers
    let init: Vec<f64> = mean_value.iter().map(|mv| (1.0 / mv).clamp(lo, hi)).collect();
    let init_objective = dual_objective(&init, prob)?;

    let bid_scale = support
        .iter()
        .flat_map(|(_, col)| col.iter().copied())
        .fold(0.0, f64::max)
        * hi;
    let sm = Smoother { support: &support, n };
    let mut beta = init.clone();
    let mut mu = MU_START * bid_scale;
    let mut iterations = 0;
    let mut best: Option<(f64, Vec<f64>, f64)> = None;
    loop {
        iterations += newton_stage(&sm, &mut beta, mu, lo, hi, max_iters.saturating_sub(iterations).max(1));
        let objective = dual_objective(&beta, prob)?;
        let utilities = sm.eval(&beta, mu).utilities;
        let gap = (objective - lagrangian_lower_bound(&utilities, n, lo, hi)).max(0.0);
        if best.as_ref().is_none_or(|(g, _, _)| gap < *g) {
            best = Some((gap, beta.clone(), objective));
        }
        let done = gap <= 0.01 * tol || mu <= MU_FLOOR * bid_scale || iterations >= max_iters;
        if done {
            break;
        }
        mu *= MU_SHRINK;
    }
    let (residual, mut beta_hat, mut objective) = best.expect("at least one stage");
    if init_objective < objective {
        beta_hat = init;
        objective = init_objective;
    }
    Ok(DualSolution { beta_hat, objective, residual, iterations, converged: residual <= 10.0 * tol })
}

/// Hindsight multipliers `beta^gamma` of a realized sequence: weights are the empirical
/// item frequencies.
pub fn hindsight_solution(
    instance: &MarketInstance,
    seq: &ItemSequence,
    delta0: f64,
    tol: f64,
) -> Result<DualSolution, EgError> {
    instance.check_sequence(seq).map_err(|e| EgError::DimensionMismatch(e.to_string()))?;
    let weights = seq.empirical_distribution(instance.m());
    let prob = DualProblem::with_delta0(instance.valuations().clone(), &weights, delta0)?;
    solve_dual(&prob, tol, DEFAULT_MAX_ITERS)
}

/// Multipliers `beta*` of the market whose supply is the distribution `reference`.
pub fn reference_solution(
    instance: &MarketInstance,
    reference: &ReferenceDistribution,
    delta0: f64,
    tol: f64,
) -> Result<DualSolution, EgError> {
    let prob = DualProblem::with_delta0(instance.valuations().clone(), reference, delta0)?;
    solve_dual(&prob, tol, DEFAULT_MAX_ITERS)
}
