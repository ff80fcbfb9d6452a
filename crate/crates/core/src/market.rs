//! Market instances: agents, a finite item universe, valuations and budgets.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used when checking that probability vectors sum to one.
pub const PROB_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarketError {
    #[error("valuation matrix is empty (n={n}, m={m})")]
    Empty { n: usize, m: usize },
    #[error("row {row} has {len} entries, expected {expected}")]
    RaggedRow { row: usize, len: usize, expected: usize },
    #[error("valuation v[{agent}][{item}] = {value} is negative or not finite")]
    BadValuation { agent: usize, item: usize, value: f64 },
    #[error("agent {0} has no strictly positive valuation")]
    NoPositiveValue(usize),
    #[error("agent {0} has zero expected value under the reference distribution")]
    ZeroExpectedValue(usize),
    #[error("budget {index} = {value} must be positive and finite")]
    BadBudget { index: usize, value: f64 },
    #[error("expected {expected} budgets, got {got}")]
    BudgetCount { expected: usize, got: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("item index {index} out of range for m={m}")]
    ItemOutOfRange { index: usize, m: usize },
    #[error("item sequence must be non-empty")]
    EmptySequence,
    #[error("invalid probability vector: {0}")]
    InvalidDistribution(String),
}

/// Dense agent-by-item valuation matrix, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct ValuationMatrix {
    n: usize,
    m: usize,
    data: Vec<f64>,
}

impl ValuationMatrix {
    /// Builds a matrix from rows. Entries must be finite and nonnegative; rows may be all zero
    /// (that is checked at the [`MarketInstance`] level).
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, MarketError> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if n == 0 || m == 0 {
            return Err(MarketError::Empty { n, m });
        }
        let mut data = Vec::with_capacity(n * m);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != m {
                return Err(MarketError::RaggedRow { row: i, len: row.len(), expected: m });
            }
            for (j, &v) in row.iter().enumerate() {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(MarketError::BadValuation { agent: i, item: j, value: v });
                }
            }
            data.extend(row);
        }
        Ok(Self { n, m, data })
    }

    pub fn from_fn(n: usize, m: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self, MarketError> {
        Self::from_rows((0..n).map(|i| (0..m).map(|j| f(i, j)).collect()).collect())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn get(&self, agent: usize, item: usize) -> f64 {
        self.data[agent * self.m + item]
    }

    pub fn row(&self, agent: usize) -> &[f64] {
        &self.data[agent * self.m..(agent + 1) * self.m]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.m)
    }

    /// Values of every agent for one item, `v_i(item)` for `i in 0..n`.
    pub fn item_column(&self, item: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, item)).collect()
    }

    /// `|v|_inf`, the largest valuation entry.
    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    /// Returns a copy with agents relabeled so that new agent `k` is old agent `perm[k]`.
    pub fn permute_agents(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.n);
        let rows = perm.iter().map(|&i| self.row(i).to_vec()).collect();
        Self::from_rows(rows).expect("permutation of a valid matrix is valid")
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(<[f64]>::to_vec).collect()
    }
}

impl TryFrom<Vec<Vec<f64>>> for ValuationMatrix {
    type Error = MarketError;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self, Self::Error> {
        Self::from_rows(rows)
    }
}

impl From<ValuationMatrix> for Vec<Vec<f64>> {
    fn from(v: ValuationMatrix) -> Self {
        v.to_rows()
    }
}

/// A finite categorical distribution over the item universe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ReferenceDistribution(Vec<f64>);

impl ReferenceDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, MarketError> {
        if probs.is_empty() {
            return Err(MarketError::InvalidDistribution("empty".into()));
        }
        if let Some((j, p)) = probs.iter().enumerate().find(|(_, p)| !(p.is_finite() && **p >= 0.0)) {
            return Err(MarketError::InvalidDistribution(format!("entry {j} = {p}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(MarketError::InvalidDistribution(format!("sums to {total}")));
        }
        Ok(Self(probs))
    }

    /// Rescales nonnegative weights to sum to one.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self, MarketError> {
        let total: f64 = weights.iter().sum();
        if !(total.is_finite() && total > 0.0) || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(MarketError::InvalidDistribution(format!("weights sum to {total}")));
        }
        Self::new(weights.into_iter().map(|w| w / total).collect())
    }

    pub fn uniform(m: usize) -> Self {
        Self(vec![1.0 / m as f64; m])
    }

    pub fn point_mass(m: usize, item: usize) -> Self {
        let mut p = vec![0.0; m];
        p[item] = 1.0;
        Self(p)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for ReferenceDistribution {
    type Error = MarketError;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<ReferenceDistribution> for Vec<f64> {
    fn from(d: ReferenceDistribution) -> Self {
        d.0
    }
}

#[derive(Serialize, Deserialize)]
struct RawInstance {
    n: usize,
    m: usize,
    valuations: ValuationMatrix,
    #[serde(default)]
    budgets: Option<Vec<f64>>,
}

/// A market: `n` agents with per-step budgets and valuations over `m` item types.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawInstance", into = "RawInstance")]
pub struct MarketInstance {
    valuations: ValuationMatrix,
    budgets: Vec<f64>,
}

impl MarketInstance {
    /// Instance with uniform per-step budgets `1/n`.
    pub fn new(valuations: ValuationMatrix) -> Result<Self, MarketError> {
        let n = valuations.n();
        Self::with_budgets(valuations, vec![1.0 / n as f64; n])
    }

    pub fn with_budgets(valuations: ValuationMatrix, budgets: Vec<f64>) -> Result<Self, MarketError> {
        if budgets.len() != valuations.n() {
            return Err(MarketError::BudgetCount { expected: valuations.n(), got: budgets.len() });
        }
        if let Some((i, &b)) = budgets.iter().enumerate().find(|(_, b)| !(b.is_finite() && **b > 0.0)) {
            return Err(MarketError::BadBudget { index: i, value: b });
        }
        for (i, row) in valuations.rows().enumerate() {
            if !row.iter().any(|&v| v > 0.0) {
                return Err(MarketError::NoPositiveValue(i));
            }
        }
        Ok(Self { valuations, budgets })
    }

    pub fn n(&self) -> usize {
        self.valuations.n()
    }

    pub fn m(&self) -> usize {
        self.valuations.m()
    }

    pub fn valuations(&self) -> &ValuationMatrix {
        &self.valuations
    }

    pub fn budgets(&self) -> &[f64] {
        &self.budgets
    }

    /// Same budgets, new valuations (e.g. after normalization).
    pub fn with_valuations(&self, valuations: ValuationMatrix) -> Result<Self, MarketError> {
        Self::with_budgets(valuations, self.budgets.clone())
    }

    pub fn check_sequence(&self, seq: &ItemSequence) -> Result<(), MarketError> {
        match seq.items().iter().find(|&&j| j >= self.m()) {
            Some(&j) => Err(MarketError::ItemOutOfRange { index: j, m: self.m() }),
            None => Ok(()),
        }
    }
}

impl TryFrom<RawInstance> for MarketInstance {
    type Error = MarketError;

    fn try_from(raw: RawInstance) -> Result<Self, Self::Error> {
        if raw.valuations.n() != raw.n || raw.valuations.m() != raw.m {
            return Err(MarketError::DimensionMismatch(format!(
                "declared {}x{}, valuations are {}x{}",
                raw.n,
                raw.m,
                raw.valuations.n(),
                raw.valuations.m()
            )));
        }
        match raw.budgets {
            Some(b) => Self::with_budgets(raw.valuations, b),
            None => Self::new(raw.valuations),
        }
    }
}

impl From<MarketInstance> for RawInstance {
    fn from(inst: MarketInstance) -> Self {
        RawInstance {
            n: inst.n(),
            m: inst.m(),
            valuations: inst.valuations,
            budgets: Some(inst.budgets),
        }
    }
}

/// The realized arrivals `theta^1..theta^t` as item indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ItemSequence(Vec<usize>);

impl ItemSequence {
    pub fn new(items: Vec<usize>) -> Result<Self, MarketError> {
        if items.is_empty() {
            return Err(MarketError::EmptySequence);
        }
        Ok(Self(items))
    }

    /// Validates indices against the universe size as well.
    pub fn for_universe(items: Vec<usize>, m: usize) -> Result<Self, MarketError> {
        if let Some(&j) = items.iter().find(|&&j| j >= m) {
            return Err(MarketError::ItemOutOfRange { index: j, m });
        }
        Self::new(items)
    }

    pub fn items(&self) -> &[usize] {
        &self.0
    }

    /// Horizon `t`.
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Empirical item frequencies over a universe of size `m`.
    pub fn empirical_distribution(&self, m: usize) -> ReferenceDistribution {
        let mut counts = vec![0.0; m];
        for &j in &self.0 {
            counts[j] += 1.0;
        }
        let t = self.0.len() as f64;
        ReferenceDistribution(counts.into_iter().map(|c| c / t).collect())
    }
}

impl TryFrom<Vec<usize>> for ItemSequence {
    type Error = MarketError;

    fn try_from(v: Vec<usize>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<ItemSequence> for Vec<usize> {
    fn from(s: ItemSequence) -> Self {
        s.0
    }
}

/// Rescales each agent's row so that its expected value under `reference` is one.
pub fn normalize_valuations(
    valuations: &ValuationMatrix,
    reference: &ReferenceDistribution,
) -> Result<ValuationMatrix, MarketError> {
    if reference.len() != valuations.m() {
        return Err(MarketError::DimensionMismatch(format!(
            "reference has {} items, valuations have {}",
            reference.len(),
            valuations.m()
        )));
    }
    let mut data = Vec::with_capacity(valuations.n() * valuations.m());
    for (i, row) in valuations.rows().enumerate() {
        let mean: f64 = row.iter().zip(reference.probs()).map(|(v, p)| v * p).sum();
        if mean <= 0.0 {
            return Err(MarketError::ZeroExpectedValue(i));
        }
        data.extend(row.iter().map(|v| v / mean));
    }
    Ok(ValuationMatrix { n: valuations.n(), m: valuations.m(), data })
}

/// Average utilities when every arriving item is split in proportion to budgets:
/// `u_i = (1/t) * sum_tau B_i v_i(theta^tau)`.
pub fn proportional_share_utilities(instance: &MarketInstance, seq: &ItemSequence) -> Vec<f64> {
    let v = instance.valuations();
    let t = seq.len() as f64;
    instance
        .budgets()
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let total: f64 = seq.items().iter().map(|&j| v.get(i, j)).sum();
            b * total / t
        })
        .collect()
}
