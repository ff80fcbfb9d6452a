//! Composite dual averaging over a box with the log-barrier regularizer
//! `Psi(w) = -(1/n) sum_i log w_i`, and the regret-bound diagnostic that certifies a run.
//!
//! Each step observes a sample, takes a subgradient of the loss at the current iterate, folds it
//! into the running average `g_bar`, and moves to `argmin_w <g_bar, w> + Psi(w)` over the box.

use std::io::Write;

use serde::{Deserialize, Serialize};

/// Box-restricted log barrier `Psi(w) = -(1/n) sum_i log w_i` on `[lo, hi]^n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogBarrierRegularizer {
    pub n: usize,
    pub lo: f64,
    pub hi: f64,
}

impl LogBarrierRegularizer {
    pub fn new(n: usize, lo: f64, hi: f64) -> Self {
        assert!(n > 0, "dimension must be positive");
        assert!(lo > 0.0 && hi > lo, "box must satisfy 0 < lo < hi");
        Self { n, lo, hi }
    }

    /// The pacing box `[1/((1+delta0) n), 1+delta0]`.
    pub fn pacing(n: usize, delta0: f64) -> Self {
        Self::new(n, 1.0 / ((1.0 + delta0) * n as f64), 1.0 + delta0)
    }

    pub fn value(&self, w: &[f64]) -> f64 {
        -w.iter().map(|x| x.ln()).sum::<f64>() / self.n as f64
    }

    /// Strong-convexity modulus of the barrier on the box in the Euclidean norm, `1/(n hi^2)`.
    pub fn sigma(&self) -> f64 {
        1.0 / (self.n as f64 * self.hi * self.hi)
    }

    /// The constant `1/n` used for this barrier in the PACE convergence analysis.
    pub fn nominal_sigma(&self) -> f64 {
        1.0 / self.n as f64
    }

    /// `argmin Psi` over the box, i.e. the upper corner.
    pub fn initial_point(&self) -> Vec<f64> {
        vec![self.hi; self.n]
    }

    #[inline]
    pub fn project(&self, x: f64) -> f64 {
        x.clamp(self.lo, self.hi)
    }
}

/// Exact minimizer of `<g_bar, w> - (1/n) sum log w_i` over the box: coordinatewise
/// `clamp(1/(n g_bar_i))`, with `1/0 = +inf` landing on the upper bound.
pub fn composite_argmin(g_bar: &[f64], reg: &LogBarrierRegularizer) -> Vec<f64> {
    let n = reg.n as f64;
    g_bar
        .iter()
        .map(|&g| {
            let x = if g > 0.0 { 1.0 / (n * g) } else { f64::INFINITY };
            reg.project(x)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaState {
    pub tau: usize,
    pub g_bar: Vec<f64>,
    pub w: Vec<f64>,
}

impl DaState {
    /// `g_bar = 0`, `w_1 = argmin Psi`.
    pub fn new(reg: &LogBarrierRegularizer) -> Self {
        Self { tau: 0, g_bar: vec![0.0; reg.n], w: reg.initial_point() }
    }
}

/// One dual-averaging step with subgradient `g` taken at `state.w`.
pub fn da_step(state: &DaState, g: &[f64], reg: &LogBarrierRegularizer) -> DaState {
    assert_eq!(g.len(), reg.n, "subgradient dimension");
    let tau = state.tau + 1;
    let t = tau as f64;
    // same rounding as the PACE running average, so tied auctions resolve identically
    let g_bar: Vec<f64> = state.g_bar.iter().zip(g).map(|(gb, gi)| ((t - 1.0) * gb + gi) / t).collect();
    let w = composite_argmin(&g_bar, reg);
    DaState { tau, g_bar, w }
}

/// A stochastic composite objective `F(w, z) = f(w, z) + Psi(w)` seen through a subgradient
/// oracle for `f`.
pub trait SubgradientOracle {
    type Sample;

    fn dim(&self) -> usize;

    /// A fixed element of `partial_w f(w, z)`.
    fn subgradient(&self, w: &[f64], z: &Self::Sample) -> Vec<f64>;

    /// `f(w, z)` without the regularizer.
    fn loss(&self, w: &[f64], z: &Self::Sample) -> f64;
}

/// One recorded step: iterate, subgradient at it, and `F(w_tau, z_tau)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DaRecord {
    pub w: Vec<f64>,
    pub g: Vec<f64>,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DaTrajectory {
    pub steps: Vec<DaRecord>,
    /// The iterate after the last step, `w_{t+1}`.
    pub final_w: Vec<f64>,
}

impl DaTrajectory {
    /// Iterates `w_1, ..., w_{t+1}`.
    pub fn iterates(&self) -> impl Iterator<Item = &[f64]> {
        self.steps.iter().map(|s| s.w.as_slice()).chain(std::iter::once(self.final_w.as_slice()))
    }

    /// Writes `tau,w_1..w_n,g_1..g_n`, one row per step.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let n = self.final_w.len();
        let mut header = vec!["tau".to_string()];
        header.extend((1..=n).map(|i| format!("w_{i}")));
        header.extend((1..=n).map(|i| format!("g_{i}")));
        writeln!(out, "{}", header.join(","))?;
        for (k, s) in self.steps.iter().enumerate() {
            let mut row = vec![(k + 1).to_string()];
            row.extend(s.w.iter().chain(&s.g).map(|x| format!("{x:e}")));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Runs dual averaging over `samples`, recording every step.
pub fn run_dual_averaging<O: SubgradientOracle>(
    oracle: &O,
    reg: &LogBarrierRegularizer,
    samples: &[O::Sample],
) -> DaTrajectory {
    let mut state = DaState::new(reg);
    let mut steps = Vec::with_capacity(samples.len());
    for z in samples {
        let g = oracle.subgradient(&state.w, z);
        let objective = oracle.loss(&state.w, z) + reg.value(&state.w);
        let next = da_step(&state, &g, reg);
        steps.push(DaRecord { w: std::mem::take(&mut state.w), g, objective });
        state = next;
    }
    DaTrajectory { steps, final_w: state.w }
}

/// `F(w, z_tau)` for every sample, for use as the comparator column of [`regret_bound_check`].
pub fn comparator_objectives<O: SubgradientOracle>(
    oracle: &O,
    reg: &LogBarrierRegularizer,
    w: &[f64],
    samples: &[O::Sample],
) -> Vec<f64> {
    let psi = reg.value(w);
    samples.iter().map(|z| oracle.loss(w, z) + psi).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegretBoundCheck {
    /// `||w_{t+1} - w_ref||^2`.
    pub lhs: f64,
    /// `(2/(sigma t)) (Delta_t - R_t(w_ref))`.
    pub rhs: f64,
    pub regret: f64,
    pub delta: f64,
    pub holds: bool,
}

/// Evaluates `||w_{t+1} - w||^2 <= (2/(sigma t)) (Delta_t - R_t(w))` on a recorded run, with
/// `R_t(w) = sum_tau F(w_tau, z_tau) - F(w, z_tau)` and
/// `Delta_t = (1/(2 sigma)) (5 ||g_1||^2 + sum_{tau=1}^{t-1} ||g_{tau+1}||^2 / tau)`.
pub fn regret_bound_check(trajectory: &DaTrajectory, w_ref: &[f64], f_ref: &[f64], sigma: f64) -> RegretBoundCheck {
    assert!(!trajectory.steps.is_empty(), "empty trajectory");
    assert_eq!(trajectory.steps.len(), f_ref.len(), "comparator length");
    assert!(sigma > 0.0);
    let t = trajectory.steps.len();
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();

    let regret: f64 = trajectory.steps.iter().zip(f_ref).map(|(s, fr)| s.objective - fr).sum();
    let mut acc = 5.0 * sq(&trajectory.steps[0].g);
    for (tau, s) in trajectory.steps.iter().enumerate().skip(1) {
        acc += sq(&s.g) / tau as f64;
    }
    let delta = acc / (2.0 * sigma);
    let lhs: f64 = trajectory.final_w.iter().zip(w_ref).map(|(a, b)| (a - b) * (a - b)).sum();
    let rhs = 2.0 / (sigma * t as f64) * (delta - regret);
    RegretBoundCheck { lhs, rhs, regret, delta, holds: lhs <= rhs + 1e-9 }
}

/// Largest value of `||w_{tau+1} - w_tau|| * tau * sigma / (2 G)` along the run; the one-step
/// stability bound says this never exceeds one.
pub fn one_step_stability_ratio(trajectory: &DaTrajectory, g_bound: f64, sigma: f64) -> f64 {
    let iterates: Vec<&[f64]> = trajectory.iterates().collect();
    iterates
        .windows(2)
        .enumerate()
        .map(|(k, w)| {
            let step: f64 = w[0].iter().zip(w[1]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            step * (k + 1) as f64 * sigma / (2.0 * g_bound)
        })
        .fold(0.0, f64::max)
}
