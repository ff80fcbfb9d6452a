//! Regret, envy and convergence errors of a PACE run against benchmark solutions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market::{ItemSequence, MarketInstance};
use crate::pace::{PaceTrace, PacingState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("reference entry {index} = {value} must be strictly positive")]
    NonpositiveReference { index: usize, value: f64 },
}

fn same_len(what: &str, a: usize, b: usize) -> Result<(), MetricsError> {
    if a == b {
        Ok(())
    } else {
        Err(MetricsError::DimensionMismatch(format!("{what}: {a} vs {b}")))
    }
}

/// Signed per-agent regret `t u^HS_i - sum_tau u_i^tau`.
pub fn regret(trace: &PaceTrace, hindsight_u: &[f64], t: usize) -> Result<Vec<f64>, MetricsError> {
    same_len("trace length vs horizon", trace.t(), t)?;
    same_len("hindsight utilities", hindsight_u.len(), trace.n)?;
    let tf = t as f64;
    Ok(hindsight_u.iter().zip(&trace.final_u_bar).map(|(h, u)| tf * h - tf * u).collect())
}

/// `S[i][k]`: agent i's total value for the items agent k won.
fn bundle_values(trace: &PaceTrace, instance: &MarketInstance, seq: &ItemSequence) -> Result<Vec<Vec<f64>>, MetricsError> {
    same_len("trace length vs sequence", trace.t(), seq.len())?;
    same_len("agents", trace.n, instance.n())?;
    let v = instance.valuations();
    let n = instance.n();
    let mut s = vec![vec![0.0; n]; n];
    for (&k, &j) in trace.winners.iter().zip(seq.items()) {
        for (i, row) in s.iter_mut().enumerate() {
            row[k] += v.get(i, j);
        }
    }
    Ok(s)
}

/// Envy of each agent toward the best other bundle of the realized integral allocation,
/// `max_k S_ik - S_ii` (nonnegative since `k = i` is included).
pub fn envy(trace: &PaceTrace, instance: &MarketInstance, seq: &ItemSequence) -> Result<Vec<f64>, MetricsError> {
    let s = bundle_values(trace, instance, seq)?;
    Ok(s.iter().enumerate().map(|(i, row)| envy_of_row(row, i)).collect())
}

fn envy_of_row(row: &[f64], i: usize) -> f64 {
    row.iter().copied().fold(row[i], f64::max) - row[i]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SquaredErrors {
    /// `||beta^{t+1} - beta_ref||^2`.
    pub beta: f64,
    /// `||u_bar^t - u_ref||^2`.
    pub utility: f64,
    /// `||b_bar^t - (1/n) 1||^2`.
    pub expenditure: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn squared_errors(beta: &[f64], u_bar: &[f64], mean_spend: &[f64], ref_beta: &[f64], ref_u: &[f64]) -> SquaredErrors {
    let target = 1.0 / beta.len() as f64;
    SquaredErrors {
        beta: sq_dist(beta, ref_beta),
        utility: sq_dist(u_bar, ref_u),
        expenditure: mean_spend.iter().map(|b| (b - target) * (b - target)).sum(),
    }
}

pub fn mean_square_errors(trace: &PaceTrace, ref_beta: &[f64], ref_u: &[f64]) -> Result<SquaredErrors, MetricsError> {
    same_len("reference multipliers", ref_beta.len(), trace.n)?;
    same_len("reference utilities", ref_u.len(), trace.n)?;
    Ok(squared_errors(&trace.final_beta, &trace.final_u_bar, &trace.mean_spend, ref_beta, ref_u))
}

/// `max_i |actual_i - reference_i| / reference_i`.
pub fn relative_error_max(actual: &[f64], reference: &[f64]) -> Result<f64, MetricsError> {
    same_len("relative error", actual.len(), reference.len())?;
    if let Some((index, &value)) = reference.iter().enumerate().find(|(_, r)| !(**r > 0.0)) {
        return Err(MetricsError::NonpositiveReference { index, value });
    }
    Ok(actual.iter().zip(reference).map(|(a, r)| (a - r).abs() / r).fold(0.0, f64::max))
}

/// Metric names emitted by the harness, in CSV order.
pub const METRIC_NAMES: [&str; 12] = [
    "rel_beta_hs",
    "rel_u_hs",
    "rel_beta_star",
    "rel_u_star",
    "mse_beta_hs",
    "mse_u_hs",
    "mse_beta_star",
    "mse_u_star",
    "mse_expenditure",
    "regret_max",
    "envy_max",
    "baseline_rel_u_hs",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesMeta {
    pub model: String,
    pub path_id: usize,
}

/// Metric values of one sample path on a common time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub meta: SeriesMeta,
    pub times: Vec<usize>,
    pub values: BTreeMap<String, Vec<f64>>,
}

impl MetricSeries {
    pub fn new(meta: SeriesMeta) -> Self {
        Self { meta, times: Vec::new(), values: BTreeMap::new() }
    }

    pub fn push(&mut self, t: usize, record: &[(&str, f64)]) {
        self.times.push(t);
        for (name, value) in record {
            self.values.entry((*name).to_string()).or_default().push(*value);
        }
    }

    pub fn get(&self, metric: &str) -> Option<&[f64]> {
        self.values.get(metric).map(Vec::as_slice)
    }

    /// Value of `metric` at recording time `t`.
    pub fn at(&self, metric: &str, t: usize) -> Option<f64> {
        let k = self.times.iter().position(|&s| s == t)?;
        self.get(metric).map(|v| v[k])
    }
}

/// Recording times: every step up to `dense_until`, then geometric spacing by `ratio` (rounded,
/// at least one step apart), plus `extra` checkpoints and the horizon itself.
pub fn recording_grid(t: usize, dense_until: usize, ratio: f64, extra: &[usize]) -> Vec<usize> {
    let mut grid: Vec<usize> = (1..=dense_until.min(t)).collect();
    let mut cur = dense_until.max(1);
    while cur < t {
        cur = ((cur as f64 * ratio).round() as usize).max(cur + 1);
        if cur <= t {
            grid.push(cur);
        }
    }
    grid.extend(extra.iter().copied().filter(|&e| e >= 1 && e <= t));
    grid.push(t);
    grid.sort_unstable();
    grid.dedup();
    grid
}

/// Benchmark vectors a run is scored against.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmarks {
    pub beta_hs: Vec<f64>,
    pub u_hs: Vec<f64>,
    pub beta_star: Vec<f64>,
    pub u_star: Vec<f64>,
}

/// Accumulates the per-step quantities needed to score a run at arbitrary times without
/// storing the full trace.
#[derive(Debug, Clone)]
pub struct OnlineScorer {
    n: usize,
    /// Row-major `S[i][k]`.
    bundles: Vec<f64>,
    won_utility: Vec<f64>,
    baseline_total: Vec<f64>,
    budgets: Vec<f64>,
}

impl OnlineScorer {
    pub fn new(instance: &MarketInstance) -> Self {
        let n = instance.n();
        Self {
            n,
            bundles: vec![0.0; n * n],
            won_utility: vec![0.0; n],
            baseline_total: vec![0.0; n],
            budgets: instance.budgets().to_vec(),
        }
    }

    /// Records that `winner` took an item valued `item_values` by the agents.
    pub fn observe(&mut self, winner: usize, item_values: &[f64]) {
        for (i, &v) in item_values.iter().enumerate() {
            self.bundles[i * self.n + winner] += v;
            self.baseline_total[i] += self.budgets[i] * v;
        }
        self.won_utility[winner] += item_values[winner];
    }

    pub fn max_envy(&self) -> f64 {
        self.bundles.chunks_exact(self.n).enumerate().map(|(i, row)| envy_of_row(row, i)).fold(0.0, f64::max)
    }

    /// All [`METRIC_NAMES`] for the state after `state.tau` steps.
    pub fn score(&self, state: &PacingState, bench: &Benchmarks) -> Vec<(&'static str, f64)> {
        let t = state.tau as f64;
        let spend = state.mean_spend();
        let baseline: Vec<f64> = self.baseline_total.iter().map(|b| b / t).collect();
        let rel = |a: &[f64], r: &[f64]| relative_error_max(a, r).expect("benchmarks are positive");
        let hs = squared_errors(&state.beta, &state.u_bar, &spend, &bench.beta_hs, &bench.u_hs);
        let star = squared_errors(&state.beta, &state.u_bar, &spend, &bench.beta_star, &bench.u_star);
        let regret_max = bench
            .u_hs
            .iter()
            .zip(&self.won_utility)
            .map(|(h, won)| t * h - won)
            .fold(f64::NEG_INFINITY, f64::max);
        vec![
            ("rel_beta_hs", rel(&state.beta, &bench.beta_hs)),
            ("rel_u_hs", rel(&state.u_bar, &bench.u_hs)),
            ("rel_beta_star", rel(&state.beta, &bench.beta_star)),
            ("rel_u_star", rel(&state.u_bar, &bench.u_star)),
            ("mse_beta_hs", hs.beta),
            ("mse_u_hs", hs.utility),
            ("mse_beta_star", star.beta),
            ("mse_u_star", star.utility),
            ("mse_expenditure", star.expenditure),
            ("regret_max", regret_max),
            ("envy_max", self.max_envy()),
            ("baseline_rel_u_hs", rel(&baseline, &bench.u_hs)),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::ValuationMatrix;
    use crate::pace::{run_pace, TraceRecording};
    use proptest::prelude::*;

    fn hand_example() -> (MarketInstance, ItemSequence, PaceTrace) {
        let v = ValuationMatrix::from_rows(vec![vec![0.5, 1.0], vec![1.0, 0.2]]).unwrap();
        let inst = MarketInstance::new(v).unwrap();
        let seq = ItemSequence::new(vec![0, 1]).unwrap();
        let tr = run_pace(&inst, &seq, 1.0, TraceRecording::Outcomes).unwrap();
        (inst, seq, tr)
    }

    #[test]
    fn regret_examples() {
        let (_, _, tr) = hand_example();
        assert_eq!(regret(&tr, &tr.final_u_bar.clone(), 2).unwrap(), vec![0.0, 0.0]);
        // realized totals are (1.0, 1.0); against u_hs = (0.6, 0.45) over t = 2
        let r = regret(&tr, &[0.6, 0.45], 2).unwrap();
        assert!((r[0] - 0.2).abs() < 1e-15 && (r[1] + 0.1).abs() < 1e-15);
        assert!(regret(&tr, &[0.5, 0.5], 3).is_err());

        let v = ValuationMatrix::from_rows(vec![vec![1.0, 1.0]]).unwrap();
        let inst = MarketInstance::new(v).unwrap();
        let seq = ItemSequence::new(vec![0, 1, 0]).unwrap();
        let tr = run_pace(&inst, &seq, 1.0, TraceRecording::Outcomes).unwrap();
        assert_eq!(regret(&tr, &[1.0], 3).unwrap(), vec![0.0]);
    }

    #[test]
    fn envy_examples() {
        let v = ValuationMatrix::from_rows(vec![vec![1.0, 1.0]]).unwrap();
        let inst = MarketInstance::new(v).unwrap();
        let seq = ItemSequence::new(vec![0, 1]).unwrap();
        let tr = run_pace(&inst, &seq, 1.0, TraceRecording::Outcomes).unwrap();
        assert_eq!(envy(&tr, &inst, &seq).unwrap(), vec![0.0]);

        // both items won by agent 0; agent 1 values them at 0.3 and 0.7
        let v = ValuationMatrix::from_rows(vec![vec![1.0, 1.0], vec![0.3, 0.7]]).unwrap();
        let inst = MarketInstance::new(v).unwrap();
        let tr = PaceTrace {
            n: 2,
            delta0: 1.0,
            winners: vec![0, 0],
            winning_bids: vec![2.0, 1.0],
            samples: Vec::new(),
            final_beta: vec![1.0, 2.0],
            final_u_bar: vec![1.0, 0.0],
            mean_spend: vec![1.5, 0.0],
        };
        let e = envy(&tr, &inst, &seq).unwrap();
        assert_eq!(e[0], 0.0);
        assert!((e[1] - 1.0).abs() < 1e-15);

        // each agent wins exactly what only they value
        let v = ValuationMatrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let inst = MarketInstance::new(v).unwrap();
        let tr = run_pace(&inst, &seq, 1.0, TraceRecording::Outcomes).unwrap();
        assert_eq!(envy(&tr, &inst, &seq).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn mse_examples() {
        let (_, _, tr) = hand_example();
        let e = mean_square_errors(&tr, &[1.0, 1.0], &[0.5, 0.5]).unwrap();
        assert_eq!(e.beta, 0.0);
        assert_eq!(e.utility, 0.0);
        // b_bar = (1, 1) against 1/2 each
        assert_eq!(e.expenditure, 0.5);
        assert!(mean_square_errors(&tr, &[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn relative_error_examples() {
        assert_eq!(relative_error_max(&[0.3, 2.0], &[0.3, 2.0]).unwrap(), 0.0);
        assert_eq!(relative_error_max(&[0.6, 4.0], &[0.3, 2.0]).unwrap(), 1.0);
        assert!((relative_error_max(&[1.1, 0.9], &[1.0, 1.0]).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(
            relative_error_max(&[1.0], &[0.0]),
            Err(MetricsError::NonpositiveReference { index: 0, value: 0.0 })
        );
    }

    #[test]
    fn grid_shape() {
        let g = recording_grid(20_000, 100, 1.1, &[500, 1000, 2000]);
        assert_eq!(&g[..3], &[1, 2, 3]);
        assert_eq!(*g.last().unwrap(), 20_000);
        assert!(g.contains(&500) && g.contains(&1000) && g.contains(&2000));
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        assert!(g.len() < 200);
        assert_eq!(recording_grid(5, 100, 1.1, &[7]), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn online_scorer_matches_offline_metrics() {
        let v = ValuationMatrix::from_rows(vec![vec![0.5, 1.0, 0.2], vec![1.0, 0.2, 0.9], vec![0.3, 0.3, 0.3]]).unwrap();
        let inst = MarketInstance::new(v.clone()).unwrap();
        let seq = ItemSequence::new((0..50).map(|k| (k * 7 + k / 3) % 3).collect()).unwrap();
        let tr = run_pace(&inst, &seq, 1.0, TraceRecording::Outcomes).unwrap();
        let mut state = PacingState::new(3, 1.0);
        let mut scorer = OnlineScorer::new(&inst);
        for &j in seq.items() {
            let col = v.item_column(j);
            let (w, _) = state.advance(&col);
            scorer.observe(w, &col);
        }
        let bench = Benchmarks {
            beta_hs: vec![0.9, 0.8, 1.2],
            u_hs: vec![0.4, 0.45, 0.3],
            beta_star: vec![1.0, 1.0, 1.0],
            u_star: vec![1.0 / 3.0; 3],
        };
        let rec: BTreeMap<&str, f64> = scorer.score(&state, &bench).into_iter().collect();
        let e = envy(&tr, &inst, &seq).unwrap();
        assert!((rec["envy_max"] - e.iter().copied().fold(0.0, f64::max)).abs() < 1e-12);
        let r = regret(&tr, &bench.u_hs, 50).unwrap();
        assert!((rec["regret_max"] - r.iter().copied().fold(f64::MIN, f64::max)).abs() < 1e-12);
        let mse = mean_square_errors(&tr, &bench.beta_star, &bench.u_star).unwrap();
        assert!((rec["mse_beta_star"] - mse.beta).abs() < 1e-15);
        assert!((rec["mse_expenditure"] - mse.expenditure).abs() < 1e-15);
        let prop = crate::market::proportional_share_utilities(&inst, &seq);
        assert!((rec["baseline_rel_u_hs"] - relative_error_max(&prop, &bench.u_hs).unwrap()).abs() < 1e-12);
        assert_eq!(rec.len(), METRIC_NAMES.len());
    }

    proptest! {
        #[test]
        fn relative_error_scale_invariant(
            pairs in prop::collection::vec((0.0f64..5.0, 0.1f64..5.0), 1..10),
            c in 0.5f64..4.0,
        ) {
            // powers of two keep the scaling exact
            let c = 2f64.powi(c.round() as i32);
            let (a, r): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let sa: Vec<f64> = a.iter().map(|x| x * c).collect();
            let sr: Vec<f64> = r.iter().map(|x| x * c).collect();
            prop_assert_eq!(relative_error_max(&a, &r).unwrap(), relative_error_max(&sa, &sr).unwrap());
        }

        #[test]
        fn regret_identity_and_envy_nonnegative(
            rows in prop::collection::vec(prop::collection::vec(0.01f64..2.0, 4), 1..5),
            items in prop::collection::vec(0usize..4, 1..120),
            hs in prop::collection::vec(0.01f64..1.0, 5),
        ) {
            let n = rows.len();
            let inst = MarketInstance::new(ValuationMatrix::from_rows(rows).unwrap()).unwrap();
            let seq = ItemSequence::new(items).unwrap();
            let t = seq.len();
            let tr = run_pace(&inst, &seq, 1.0, TraceRecording::Outcomes).unwrap();
            let hs = &hs[..n];
            let r = regret(&tr, hs, t).unwrap();
            let realized = tr.total_utilities(inst.valuations(), &seq);
            for i in 0..n {
                prop_assert!((r[i] + realized[i] - t as f64 * hs[i]).abs() <= 1e-9 * t as f64);
            }
            prop_assert!(envy(&tr, &inst, &seq).unwrap().iter().all(|&e| e >= 0.0));
        }

        #[test]
        fn mse_permutation_equivariant(
            beta in prop::collection::vec(0.3f64..2.0, 3),
            refb in prop::collection::vec(0.3f64..2.0, 3),
            u in prop::collection::vec(0.0f64..1.0, 3),
            refu in prop::collection::vec(0.0f64..1.0, 3),
            spend in prop::collection::vec(0.0f64..1.0, 3),
        ) {
            let perm = [2usize, 0, 1];
            let p = |v: &[f64]| perm.iter().map(|&k| v[k]).collect::<Vec<f64>>();
            let a = squared_errors(&beta, &u, &spend, &refb, &refu);
            let b = squared_errors(&p(&beta), &p(&u), &p(&spend), &p(&refb), &p(&refu));
            prop_assert!((a.beta - b.beta).abs() < 1e-12);
            prop_assert!((a.utility - b.utility).abs() < 1e-12);
            prop_assert!((a.expenditure - b.expenditure).abs() < 1e-12);
        }
    }
}
