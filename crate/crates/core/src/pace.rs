//! PACE: first-price auctions with paced bids.
//!
//! Every arriving item goes, whole, to the agent with the highest paced bid `beta_i v_i(theta)`
//! (smallest index on ties) at a price equal to that bid. Each agent then refreshes its average
//! realized utility and resets its multiplier to `clamp(1/(n u_bar_i), 1/((1+delta0) n), 1+delta0)`.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dual_averaging::{da_step, DaState, LogBarrierRegularizer, SubgradientOracle};
use crate::market::{ItemSequence, MarketInstance, ValuationMatrix};

pub const DEFAULT_DELTA0: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PaceError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("delta0 must be positive and finite, got {0}")]
    InvalidDelta0(f64),
}

/// Winner of a single first-price auction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub winner: usize,
    pub winning_bid: f64,
    /// `u^tau`: the winner's value, zero elsewhere.
    pub utilities: Vec<f64>,
    /// `b^tau`: the winning bid charged to the winner, zero elsewhere.
    pub expenditures: Vec<f64>,
}

/// Smallest index attaining `max_i beta_i v_i` and that bid.
#[inline]
pub fn highest_bidder(beta: &[f64], item_values: &[f64]) -> (usize, f64) {
    let mut winner = 0;
    let mut best = beta[0] * item_values[0];
    for (i, (b, v)) in beta.iter().zip(item_values).enumerate().skip(1) {
        let bid = b * v;
        if bid > best {
            best = bid;
            winner = i;
        }
    }
    (winner, best)
}

pub fn auction_step(beta: &[f64], item_values: &[f64]) -> StepOutcome {
    assert_eq!(beta.len(), item_values.len(), "one bid per agent");
    let n = beta.len();
    let (winner, winning_bid) = highest_bidder(beta, item_values);
    let mut utilities = vec![0.0; n];
    let mut expenditures = vec![0.0; n];
    utilities[winner] = item_values[winner];
    expenditures[winner] = winning_bid;
    StepOutcome { winner, winning_bid, utilities, expenditures }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacingState {
    pub beta: Vec<f64>,
    pub u_bar: Vec<f64>,
    pub tau: usize,
    pub cumulative_spend: Vec<f64>,
    pub delta0: f64,
}

impl PacingState {
    /// `beta^1 = (1 + delta0) 1_n`, nothing won or spent yet.
    pub fn new(n: usize, delta0: f64) -> Self {
        Self {
            beta: vec![1.0 + delta0; n],
            u_bar: vec![0.0; n],
            tau: 0,
            cumulative_spend: vec![0.0; n],
            delta0,
        }
    }

    pub fn n(&self) -> usize {
        self.beta.len()
    }

    /// `[1/((1+delta0) n), 1+delta0]`.
    pub fn bounds(&self) -> (f64, f64) {
        (1.0 / ((1.0 + self.delta0) * self.n() as f64), 1.0 + self.delta0)
    }

    /// Advances the state in place by one arrival; returns `(winner, winning_bid)`.
    pub fn advance(&mut self, item_values: &[f64]) -> (usize, f64) {
        let (winner, bid) = highest_bidder(&self.beta, item_values);
        self.tau += 1;
        let tau = self.tau as f64;
        let n = self.n() as f64;
        let (lo, hi) = self.bounds();
        for (i, (ub, beta)) in self.u_bar.iter_mut().zip(self.beta.iter_mut()).enumerate() {
            let u = if i == winner { item_values[i] } else { 0.0 };
            *ub = ((tau - 1.0) * *ub + u) / tau;
            let target = if *ub > 0.0 { 1.0 / (n * *ub) } else { f64::INFINITY };
            *beta = target.max(lo).min(hi);
        }
        self.cumulative_spend[winner] += bid;
        (winner, bid)
    }

    /// Average expenditure per step so far, `b_bar^tau`.
    pub fn mean_spend(&self) -> Vec<f64> {
        let tau = self.tau.max(1) as f64;
        self.cumulative_spend.iter().map(|s| s / tau).collect()
    }
}

/// Functional form of one PACE step.
pub fn pace_update(state: &PacingState, item_values: &[f64]) -> (PacingState, StepOutcome) {
    assert_eq!(state.n(), item_values.len(), "one value per agent");
    let outcome = auction_step(&state.beta, item_values);
    let mut next = state.clone();
    next.advance(item_values);
    (next, outcome)
}

/// What to keep of the per-step multiplier and utility trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum TraceRecording {
    /// Winners and bids only.
    #[default]
    Outcomes,
    /// Also `beta^{tau+1}` and `u_bar^tau` every `k` steps (and after the final step).
    Every(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub tau: usize,
    /// Multipliers after step `tau`, i.e. `beta^{tau+1}`.
    pub beta: Vec<f64>,
    pub u_bar: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaceTrace {
    pub n: usize,
    pub delta0: f64,
    pub winners: Vec<usize>,
    pub winning_bids: Vec<f64>,
    pub samples: Vec<TraceSample>,
    /// `beta^{t+1}`.
    pub final_beta: Vec<f64>,
    /// `u_bar^t`.
    pub final_u_bar: Vec<f64>,
    /// `b_bar^t = (1/t) sum_tau b^tau`.
    pub mean_spend: Vec<f64>,
}

impl PaceTrace {
    pub fn t(&self) -> usize {
        self.winners.len()
    }

    /// Realized cumulative utilities `sum_tau u_i^tau`.
    pub fn total_utilities(&self, valuations: &ValuationMatrix, seq: &ItemSequence) -> Vec<f64> {
        let mut total = vec![0.0; self.n];
        for (&k, &j) in self.winners.iter().zip(seq.items()) {
            total[k] += valuations.get(k, j);
        }
        total
    }

    /// CSV with columns `tau,winner,winning_bid[,beta_1..beta_n,ubar_1..ubar_n]`. Winners are
    /// 1-based. Multiplier columns appear when samples were recorded; only sampled rows carry them.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let with_state = !self.samples.is_empty();
        let mut header = vec!["tau".to_string(), "winner".into(), "winning_bid".into()];
        if with_state {
            header.extend((1..=self.n).map(|i| format!("beta_{i}")));
            header.extend((1..=self.n).map(|i| format!("ubar_{i}")));
        }
        writeln!(out, "{}", header.join(","))?;
        let mut samples = self.samples.iter().peekable();
        for (k, (w, b)) in self.winners.iter().zip(&self.winning_bids).enumerate() {
            let tau = k + 1;
            let mut row = vec![tau.to_string(), (w + 1).to_string(), format!("{b:e}")];
            if with_state {
                match samples.next_if(|s| s.tau == tau) {
                    Some(s) => row.extend(s.beta.iter().chain(&s.u_bar).map(|x| format!("{x:e}"))),
                    None => row.extend(std::iter::repeat_n(String::new(), 2 * self.n)),
                }
            }
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn check_inputs(instance: &MarketInstance, seq: &ItemSequence, delta0: f64) -> Result<(), PaceError> {
    if !(delta0.is_finite() && delta0 > 0.0) {
        return Err(PaceError::InvalidDelta0(delta0));
    }
    instance.check_sequence(seq).map_err(|e| PaceError::DimensionMismatch(e.to_string()))
}

/// Runs PACE over a realized sequence.
pub fn run_pace(
    instance: &MarketInstance,
    seq: &ItemSequence,
    delta0: f64,
    record: TraceRecording,
) -> Result<PaceTrace, PaceError> {
    check_inputs(instance, seq, delta0)?;
    let n = instance.n();
    let v = instance.valuations();
    let t = seq.len();
    let columns: Vec<Vec<f64>> = (0..instance.m()).map(|j| v.item_column(j)).collect();

    let mut state = PacingState::new(n, delta0);
    let mut winners = Vec::with_capacity(t);
    let mut winning_bids = Vec::with_capacity(t);
    let mut samples = Vec::new();
    for &j in seq.items() {
        let (w, b) = state.advance(&columns[j]);
        winners.push(w);
        winning_bids.push(b);
        if let TraceRecording::Every(k) = record {
            if state.tau.is_multiple_of(k.max(1)) || state.tau == t {
                samples.push(TraceSample { tau: state.tau, beta: state.beta.clone(), u_bar: state.u_bar.clone() });
            }
        }
    }
    Ok(PaceTrace {
        n,
        delta0,
        winners,
        winning_bids,
        samples,
        mean_spend: state.mean_spend(),
        final_beta: state.beta,
        final_u_bar: state.u_bar,
    })
}

/// Subgradient oracle of `f(beta, theta) = max_i beta_i v_i(theta)`: the winner's value on the
/// winner's coordinate.
pub struct PaceOracle<'a> {
    columns: Vec<Vec<f64>>,
    valuations: &'a ValuationMatrix,
}

impl<'a> PaceOracle<'a> {
    pub fn new(valuations: &'a ValuationMatrix) -> Self {
        let columns = (0..valuations.m()).map(|j| valuations.item_column(j)).collect();
        Self { columns, valuations }
    }
}

impl SubgradientOracle for PaceOracle<'_> {
    type Sample = usize;

    fn dim(&self) -> usize {
        self.valuations.n()
    }

    fn subgradient(&self, w: &[f64], item: &usize) -> Vec<f64> {
        let values = &self.columns[*item];
        // independent argmax: first index of the maximum bid
        let best = w.iter().zip(values).map(|(a, b)| a * b).fold(f64::NEG_INFINITY, f64::max);
        let winner = w.iter().zip(values).position(|(a, b)| a * b == best).expect("nonempty");
        let mut g = vec![0.0; w.len()];
        g[winner] = values[winner];
        g
    }

    fn loss(&self, w: &[f64], item: &usize) -> f64 {
        w.iter().zip(&self.columns[*item]).map(|(a, b)| a * b).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Largest coordinate gap between the PACE multipliers and the dual-averaging iterates when both
/// are driven by the same sequence, over every step (including the initial point).
pub fn da_equivalence_gap(instance: &MarketInstance, seq: &ItemSequence, delta0: f64) -> Result<f64, PaceError> {
    check_inputs(instance, seq, delta0)?;
    let v = instance.valuations();
    let reg = LogBarrierRegularizer::pacing(instance.n(), delta0);
    let oracle = PaceOracle::new(v);
    let columns: Vec<Vec<f64>> = (0..instance.m()).map(|j| v.item_column(j)).collect();

    let mut pace = PacingState::new(instance.n(), delta0);
    let mut da = DaState::new(&reg);
    let gap = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let mut worst = gap(&pace.beta, &da.w);
    for &j in seq.items() {
        let g = oracle.subgradient(&da.w, &j);
        da = da_step(&da, &g, &reg);
        pace.advance(&columns[j]);
        worst = worst.max(gap(&pace.beta, &da.w));
    }
    Ok(worst)
}

/// True when PACE and dual averaging on the PACE subgradient oracle agree to 1e-12 at every step.
pub fn equivalence_with_da(instance: &MarketInstance, seq: &ItemSequence, delta0: f64) -> Result<bool, PaceError> {
    Ok(da_equivalence_gap(instance, seq, delta0)? <= 1e-12)
}
