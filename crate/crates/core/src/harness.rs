//! Repeated-path experiments: configuration, synthetic markets, per-path simulation,
//! aggregation and CSV/JSON reporting.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use log::{debug, info};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eg_solver::{equilibrium_utilities, hindsight_solution, reference_solution, EgError};
use crate::input_models::{sample_sequence, InputModel, ModelError};
use crate::market::{normalize_valuations, MarketError, MarketInstance, ReferenceDistribution, ValuationMatrix};
use crate::metrics::{recording_grid, Benchmarks, MetricSeries, OnlineScorer, SeriesMeta};
use crate::pace::{PacingState, DEFAULT_DELTA0};
use crate::rng::{path_seed, rng_from_seed};

pub const SCHEMA_VERSION: u32 = 1;
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

const MAX_ROW_REDRAWS: usize = 1000;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("rank {rank} must lie in 1..={max}")]
    InvalidRank { rank: usize, max: usize },
    #[error("series grids or metric names differ: {0}")]
    GridMismatch(String),
    #[error("{context}: {source}")]
    Market { context: String, source: MarketError },
    #[error("{context}: {source}")]
    Model { context: String, source: ModelError },
    #[error("{context}: {source}")]
    Solver { context: String, source: EgError },
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    /// Process exit status: 2 for configuration problems, 3 for a failed required solve.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::InvalidRank { .. } | HarnessError::Json(_) => 2,
            HarnessError::Market { .. } => 2,
            HarnessError::Model { source: ModelError::NoConvergence { .. }, .. } => 3,
            HarnessError::Model { .. } => 2,
            HarnessError::Solver { source: EgError::NoConvergence { .. }, .. } => 3,
            HarnessError::Solver { .. } => 2,
            _ => 1,
        }
    }
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let context = context.into();
    move |source| HarnessError::Io { context, source }
}

/// Low-rank-plus-noise synthetic market.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMarket {
    pub n: usize,
    pub m: usize,
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_rank() -> usize {
    10
}

fn default_noise() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum MarketSource {
    Synthetic(SyntheticMarket),
    /// Path to a market instance JSON file, resolved relative to the config file.
    File { path: PathBuf },
    Inline { instance: MarketInstance },
}

/// Base item distribution of a generated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseSpec {
    Uniform,
    Random(u64),
    Probs(Vec<f64>),
}

impl BaseSpec {
    fn build(&self, m: usize) -> Result<ReferenceDistribution, HarnessError> {
        match self {
            BaseSpec::Uniform => Ok(ReferenceDistribution::uniform(m)),
            BaseSpec::Random(seed) => Ok(InputModel::random_distribution(m, *seed)),
            BaseSpec::Probs(p) => {
                if p.len() != m {
                    return Err(HarnessError::Config(format!("base has {} entries, market has {m} items", p.len())));
                }
                ReferenceDistribution::new(p.clone()).map_err(|e| HarnessError::Config(e.to_string()))
            }
        }
    }
}

fn default_sharpness() -> f64 {
    1.0
}

fn default_base() -> BaseSpec {
    BaseSpec::Uniform
}

/// Input model description; generated variants size themselves to the market.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Iid {
        #[serde(default = "default_base")]
        base: BaseSpec,
    },
    Decaying {
        #[serde(default = "default_base")]
        base: BaseSpec,
        scale: f64,
        #[serde(default)]
        seed: u64,
    },
    Budgeted {
        #[serde(default = "default_base")]
        base: BaseSpec,
        delta: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Dense random chain.
    Markov {
        #[serde(default)]
        seed: u64,
    },
    /// Random per-position distributions with period `q`.
    Periodic {
        q: usize,
        #[serde(default)]
        seed: u64,
        /// Exponent applied to the uniform weights of each position; 1 keeps them flat.
        #[serde(default = "default_sharpness")]
        sharpness: f64,
    },
    Explicit { model: InputModel },
}

impl ModelSpec {
    pub fn build(&self, m: usize) -> Result<InputModel, HarnessError> {
        let wrap = |e: ModelError| HarnessError::Config(e.to_string());
        let model = match self {
            ModelSpec::Iid { base } => InputModel::iid(base.build(m)?),
            ModelSpec::Decaying { base, scale, seed } => InputModel::decaying(base.build(m)?, *scale, *seed).map_err(wrap)?,
            ModelSpec::Budgeted { base, delta, seed } => InputModel::budgeted(base.build(m)?, *delta, *seed).map_err(wrap)?,
            ModelSpec::Markov { seed } => InputModel::random_markov(m, *seed),
            ModelSpec::Periodic { q, seed, sharpness } => {
                InputModel::random_periodic_sharpened(m, *q, *seed, *sharpness).map_err(wrap)?
            }
            ModelSpec::Explicit { model } => model.clone(),
        };
        if model.m() != m {
            return Err(HarnessError::Config(format!("model has {} items, market has {m}", model.m())));
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub label: String,
    #[serde(flatten)]
    pub spec: ModelSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOptions {
    pub dense_until: usize,
    pub ratio: f64,
    pub extra: Vec<usize>,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self { dense_until: 100, ratio: 1.1, extra: vec![500, 1000, 2000] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub market: MarketSource,
    pub models: Vec<ModelEntry>,
    pub t: usize,
    pub paths: usize,
    #[serde(default = "default_delta0")]
    pub delta0: f64,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub grid: GridOptions,
    #[serde(default = "default_solver_tol")]
    pub solver_tol: f64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Testing hook: every path uses the base seed itself.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub force_equal_seeds: bool,
}

fn default_delta0() -> f64 {
    DEFAULT_DELTA0
}

fn default_solver_tol() -> f64 {
    crate::eg_solver::DEFAULT_TOL
}

impl ExperimentConfig {
    /// Parses and validates a config file; relative market paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        if let MarketSource::File { path: p } = &mut cfg.market {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("unsupported schema_version {} (expected {SCHEMA_VERSION})", self.schema_version));
        }
        if self.t == 0 {
            return bad("t must be at least 1".into());
        }
        if self.paths == 0 {
            return bad("paths must be at least 1".into());
        }
        if !(self.delta0 > 0.0 && self.delta0.is_finite()) {
            return bad(format!("delta0 must be positive, got {}", self.delta0));
        }
        if !(self.solver_tol > 0.0) {
            return bad(format!("solver_tol must be positive, got {}", self.solver_tol));
        }
        if self.models.is_empty() {
            return bad("at least one model is required".into());
        }
        let mut labels: Vec<&str> = self.models.iter().map(|e| e.label.as_str()).collect();
        labels.sort_unstable();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return bad("model labels must be unique".into());
        }
        if self.models.iter().any(|e| e.label.contains([',', '"', '\n'])) {
            return bad("model labels must not contain commas, quotes or newlines".into());
        }
        if !(self.grid.ratio > 1.0) {
            return bad(format!("grid ratio must exceed 1, got {}", self.grid.ratio));
        }
        match &self.market {
            MarketSource::File { path } if !path.is_file() => bad(format!("market file {} not found", path.display())),
            MarketSource::Synthetic(s) if s.n == 0 || s.m == 0 => bad("synthetic market needs n, m >= 1".into()),
            MarketSource::Synthetic(s) if s.rank == 0 || s.rank > s.n.min(s.m) => {
                Err(HarnessError::InvalidRank { rank: s.rank, max: s.n.min(s.m) })
            }
            _ => Ok(()),
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn seed_for_path(&self, path: usize) -> u64 {
        if self.force_equal_seeds {
            self.base_seed
        } else {
            path_seed(self.base_seed, path as u64)
        }
    }
}

/// Nonnegative raw valuations `max(0, A B^T + noise E)` with `A`, `B` uniform on `[0,1)` and
/// `E` uniform on `[-1/2, 1/2)`. A row that comes out all zero (or with zero mean under
/// `reference`, when given) is redrawn from fresh factors.
pub fn raw_market(
    spec: &SyntheticMarket,
    reference: Option<&ReferenceDistribution>,
) -> Result<ValuationMatrix, HarnessError> {
    let SyntheticMarket { n, m, rank, noise, seed } = *spec;
    if rank == 0 || rank > n.min(m) {
        return Err(HarnessError::InvalidRank { rank, max: n.min(m) });
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(HarnessError::Config(format!("noise must be nonnegative, got {noise}")));
    }
    let mut rng = rng_from_seed(seed);
    let factors = |rng: &mut rand_chacha::ChaCha8Rng, count: usize| -> Vec<f64> { (0..count).map(|_| rng.gen::<f64>()).collect() };
    let a = factors(&mut rng, n * rank);
    let b = factors(&mut rng, m * rank);
    let e: Vec<f64> = factors(&mut rng, n * m).into_iter().map(|x| x - 0.5).collect();

    let row = |a_i: &[f64], e_i: &[f64]| -> Vec<f64> {
        (0..m)
            .map(|j| {
                let dot: f64 = a_i.iter().zip(&b[j * rank..(j + 1) * rank]).map(|(x, y)| x * y).sum();
                (dot + noise * e_i[j]).max(0.0)
            })
            .collect::<Vec<f64>>()
    };
    let usable = |r: &[f64]| match reference {
        Some(p) => r.iter().zip(p.probs()).map(|(v, q)| v * q).sum::<f64>() > 0.0,
        None => r.iter().any(|&v| v > 0.0),
    };

    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = row(&a[i * rank..(i + 1) * rank], &e[i * m..(i + 1) * m]);
        let mut redraws = 0;
        while !usable(&r) {
            redraws += 1;
            if redraws > MAX_ROW_REDRAWS {
                return Err(HarnessError::Config(format!("row {i} has no value under the reference distribution")));
            }
            let a_i = factors(&mut rng, rank);
            let e_i: Vec<f64> = factors(&mut rng, m).into_iter().map(|x| x - 0.5).collect();
            r = row(&a_i, &e_i);
        }
        rows.push(r);
    }
    ValuationMatrix::from_rows(rows).map_err(|source| HarnessError::Market { context: "synthetic market".into(), source })
}

/// Synthetic market with rows normalized to unit expected value under `reference`.
pub fn generate_market(spec: &SyntheticMarket, reference: &ReferenceDistribution) -> Result<MarketInstance, HarnessError> {
    if reference.len() != spec.m {
        return Err(HarnessError::Config(format!("reference has {} items, market has {}", reference.len(), spec.m)));
    }
    let raw = raw_market(spec, Some(reference))?;
    let context = || "synthetic market".to_string();
    let v = normalize_valuations(&raw, reference).map_err(|source| HarnessError::Market { context: context(), source })?;
    MarketInstance::new(v).map_err(|source| HarnessError::Market { context: context(), source })
}

/// Market, model and reference benchmark shared by every path of one model.
#[derive(Debug, Clone)]
pub struct PreparedModel {
    pub label: String,
    pub model: InputModel,
    pub instance: MarketInstance,
    pub beta_star: Vec<f64>,
    pub u_star: Vec<f64>,
}

fn load_instance(path: &Path) -> Result<MarketInstance, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}

pub fn prepare_models(cfg: &ExperimentConfig) -> Result<Vec<PreparedModel>, HarnessError> {
    let fixed = match &cfg.market {
        MarketSource::Synthetic(_) => None,
        MarketSource::File { path } => Some(load_instance(path)?),
        MarketSource::Inline { instance } => Some(instance.clone()),
    };
    cfg.models
        .iter()
        .map(|entry| {
            let m = match (&cfg.market, &fixed) {
                (MarketSource::Synthetic(s), _) => s.m,
                (_, Some(inst)) => inst.m(),
                _ => unreachable!(),
            };
            let model = entry.spec.build(m)?;
            let context = format!("model {}", entry.label);
            let reference =
                model.reference().map_err(|source| HarnessError::Model { context: context.clone(), source })?;
            let instance = match (&cfg.market, fixed.clone()) {
                (MarketSource::Synthetic(s), _) => generate_market(s, &reference)?,
                (_, Some(inst)) => inst,
                _ => unreachable!(),
            };
            let star = reference_solution(&instance, &reference, cfg.delta0, cfg.solver_tol)
                .and_then(|s| s.require_converged())
                .map_err(|source| HarnessError::Solver { context: format!("{context}: reference solve"), source })?;
            let u_star = equilibrium_utilities(&star, instance.n());
            Ok(PreparedModel { label: entry.label.clone(), model, instance, beta_star: star.beta_hat, u_star })
        })
        .collect()
}

/// Samples one path, solves its hindsight market and scores PACE on `grid`.
pub fn simulate_path(
    prep: &PreparedModel,
    path_id: usize,
    seed: u64,
    cfg: &ExperimentConfig,
    grid: &[usize],
) -> Result<MetricSeries, HarnessError> {
    let context = format!("model {} path {path_id} (seed {seed})", prep.label);
    let seq = sample_sequence(&prep.model, cfg.t, seed)
        .map_err(|source| HarnessError::Model { context: context.clone(), source })?;
    let hs = hindsight_solution(&prep.instance, &seq, cfg.delta0, cfg.solver_tol)
        .and_then(|s| s.require_converged())
        .map_err(|source| HarnessError::Solver { context: format!("{context}: hindsight solve"), source })?;
    let bench = Benchmarks {
        u_hs: equilibrium_utilities(&hs, prep.instance.n()),
        beta_hs: hs.beta_hat,
        beta_star: prep.beta_star.clone(),
        u_star: prep.u_star.clone(),
    };

    let v = prep.instance.valuations();
    let columns: Vec<Vec<f64>> = (0..v.m()).map(|j| v.item_column(j)).collect();
    let mut state = PacingState::new(prep.instance.n(), cfg.delta0);
    let mut scorer = OnlineScorer::new(&prep.instance);
    let mut series = MetricSeries::new(SeriesMeta { model: prep.label.clone(), path_id });
    let mut next = grid.iter().peekable();
    for &j in seq.items() {
        let (winner, _) = state.advance(&columns[j]);
        scorer.observe(winner, &columns[j]);
        if next.peek() == Some(&&state.tau) {
            next.next();
            series.push(state.tau, &scorer.score(&state, &bench));
        }
    }
    debug!("{context}: hindsight residual {:.2e}", hs.residual);
    Ok(series)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub model: String,
    pub metric: String,
    pub t: usize,
    pub mean: f64,
    /// Absent for a single path.
    pub stderr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub base_seed: u64,
    pub path_seeds: Vec<u64>,
    pub artifact_version: String,
    pub wall_clock_secs: f64,
    pub unix_time: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub rows: Vec<AggregateRow>,
    /// Model -> metric -> aggregate at the last recorded time.
    pub terminal: BTreeMap<String, BTreeMap<String, AggregateRow>>,
    pub provenance: Option<Provenance>,
}

impl AggregateReport {
    pub fn mean(&self, model: &str, metric: &str, t: usize) -> Option<f64> {
        self.row(model, metric, t).map(|r| r.mean)
    }

    pub fn row(&self, model: &str, metric: &str, t: usize) -> Option<&AggregateRow> {
        self.rows.iter().find(|r| r.model == model && r.metric == metric && r.t == t)
    }
}

/// Mean and standard error across paths, per model, metric and time. Models keep the order of
/// their first appearance.
pub fn summarize(series: &[MetricSeries]) -> Result<AggregateReport, HarnessError> {
    let mut groups: Vec<(&str, Vec<&MetricSeries>)> = Vec::new();
    for s in series {
        match groups.iter_mut().find(|(m, _)| *m == s.meta.model) {
            Some((_, g)) => g.push(s),
            None => groups.push((&s.meta.model, vec![s])),
        }
    }
    let mut rows = Vec::new();
    let mut terminal = BTreeMap::new();
    for (model, group) in groups {
        let first = group[0];
        for s in &group[1..] {
            if s.times != first.times || s.values.keys().ne(first.values.keys()) {
                return Err(HarnessError::GridMismatch(format!(
                    "model {model}: path {} differs from path {}",
                    s.meta.path_id, first.meta.path_id
                )));
            }
        }
        let k = group.len() as f64;
        let mut last = BTreeMap::new();
        for metric in first.values.keys() {
            let columns: Vec<&[f64]> = group.iter().map(|s| s.values[metric].as_slice()).collect();
            for (idx, &t) in first.times.iter().enumerate() {
                let mean = columns.iter().map(|c| c[idx]).sum::<f64>() / k;
                let stderr = (group.len() > 1).then(|| {
                    let var = columns.iter().map(|c| (c[idx] - mean).powi(2)).sum::<f64>() / (k - 1.0);
                    (var / k).sqrt()
                });
                rows.push(AggregateRow { model: model.to_string(), metric: metric.clone(), t, mean, stderr });
            }
            if let Some(r) = rows.last() {
                last.insert(metric.clone(), r.clone());
            }
        }
        terminal.insert(model.to_string(), last);
    }
    Ok(AggregateReport { rows, terminal, provenance: None })
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    /// Ordered by model (config order) then path index.
    pub series: Vec<MetricSeries>,
    pub report: AggregateReport,
}

/// Runs every (model, path) pair on a pool of `threads` workers (0 picks the default) and
/// aggregates. Results do not depend on `threads`.
pub fn run_experiment(cfg: &ExperimentConfig, threads: usize) -> Result<ExperimentOutput, HarnessError> {
    cfg.validate()?;
    let started = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    let grid = recording_grid(cfg.t, cfg.grid.dense_until, cfg.grid.ratio, &cfg.grid.extra);
    let seeds: Vec<u64> = (0..cfg.paths).map(|p| cfg.seed_for_path(p)).collect();

    let series = pool.install(|| -> Result<Vec<MetricSeries>, HarnessError> {
        let prepared = prepare_models(cfg)?;
        info!("prepared {} model(s); running {} path(s) each", prepared.len(), cfg.paths);
        let jobs: Vec<(&PreparedModel, usize)> =
            prepared.iter().flat_map(|p| (0..cfg.paths).map(move |k| (p, k))).collect();
        jobs.par_iter().map(|&(prep, k)| simulate_path(prep, k, seeds[k], cfg, &grid)).collect()
    })?;

    let mut report = summarize(&series)?;
    report.provenance = Some(Provenance {
        config_hash: cfg.hash(),
        base_seed: cfg.base_seed,
        path_seeds: seeds,
        artifact_version: ARTIFACT_VERSION.to_string(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
        unix_time: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    });
    Ok(ExperimentOutput { series, report })
}

#[derive(Debug, Serialize, Deserialize)]
struct MetricRow {
    model: String,
    path_id: usize,
    metric: String,
    t: usize,
    value: f64,
}

pub fn write_metrics_csv<W: Write>(series: &[MetricSeries], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    for s in series {
        for (metric, values) in &s.values {
            for (&t, &value) in s.times.iter().zip(values) {
                w.serialize(MetricRow { model: s.meta.model.clone(), path_id: s.meta.path_id, metric: metric.clone(), t, value })?;
            }
        }
    }
    w.flush().map_err(io_err("metrics csv"))?;
    Ok(())
}

/// Parses a metrics CSV back into per-path series, in order of first appearance.
pub fn read_metrics_csv<R: std::io::Read>(input: R) -> Result<Vec<MetricSeries>, HarnessError> {
    let mut series: Vec<MetricSeries> = Vec::new();
    let mut index: BTreeMap<(String, usize), usize> = BTreeMap::new();
    for row in csv::Reader::from_reader(input).deserialize::<MetricRow>() {
        let row = row?;
        let key = (row.model.clone(), row.path_id);
        let k = *index.entry(key).or_insert_with(|| {
            series.push(MetricSeries::new(SeriesMeta { model: row.model.clone(), path_id: row.path_id }));
            series.len() - 1
        });
        let s = &mut series[k];
        let values = s.values.entry(row.metric).or_default();
        if values.len() == s.times.len() {
            s.times.push(row.t);
        } else if s.times.get(values.len()) != Some(&row.t) {
            return Err(HarnessError::GridMismatch(format!("model {} path {}: unexpected t {}", row.model, row.path_id, row.t)));
        }
        values.push(row.value);
    }
    for s in &series {
        if s.values.values().any(|v| v.len() != s.times.len()) {
            return Err(HarnessError::GridMismatch(format!("model {} path {}: ragged metrics", s.meta.model, s.meta.path_id)));
        }
    }
    Ok(series)
}

pub fn write_aggregate_csv<W: Write>(report: &AggregateReport, out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    for r in &report.rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err("aggregate csv"))?;
    Ok(())
}

pub fn read_aggregate_csv<R: std::io::Read>(input: R) -> Result<Vec<AggregateRow>, HarnessError> {
    csv::Reader::from_reader(input).deserialize().map(|r| r.map_err(HarnessError::from)).collect()
}

#[derive(Serialize)]
struct SummaryJson<'a> {
    config: &'a ExperimentConfig,
    provenance: &'a Option<Provenance>,
    terminal: &'a BTreeMap<String, BTreeMap<String, AggregateRow>>,
}

/// Writes `metrics.csv`, `aggregate.csv` and `summary.json` into `dir`.
pub fn write_outputs(dir: &Path, cfg: &ExperimentConfig, out: &ExperimentOutput) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir.display().to_string()))?;
    let create = |name: &str| {
        let p = dir.join(name);
        fs::File::create(&p).map(std::io::BufWriter::new).map_err(io_err(p.display().to_string()))
    };
    write_metrics_csv(&out.series, create("metrics.csv")?)?;
    write_aggregate_csv(&out.report, create("aggregate.csv")?)?;
    let summary = SummaryJson { config: cfg, provenance: &out.report.provenance, terminal: &out.report.terminal };
    let mut f = create("summary.json")?;
    serde_json::to_writer_pretty(&mut f, &summary)?;
    f.write_all(b"\n").map_err(io_err("summary.json"))?;
    f.flush().map_err(io_err("summary.json"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config() -> ExperimentConfig {
        serde_json::from_str(
            r#"{
                "schema_version": 1,
                "market": {"source": "synthetic", "n": 2, "m": 2, "rank": 1, "seed": 3},
                "models": [{"label": "iid", "kind": "iid"}],
                "t": 100,
                "paths": 2,
                "base_seed": 5
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn summarize_examples() {
        let mk = |path_id, v: f64| {
            let mut s = MetricSeries::new(SeriesMeta { model: "a".into(), path_id });
            s.push(1, &[("x", v)]);
            s
        };
        let r = summarize(&[mk(0, 1.0), mk(1, 3.0)]).unwrap();
        assert_eq!(r.rows[0].mean, 2.0);
        assert_eq!(r.rows[0].stderr, Some(1.0));

        let r = summarize(&[mk(0, 4.0), mk(1, 4.0)]).unwrap();
        assert_eq!(r.rows[0].stderr, Some(0.0));

        let r = summarize(&[mk(0, 4.0)]).unwrap();
        assert_eq!((r.rows[0].mean, r.rows[0].stderr), (4.0, None));

        let mut other = mk(1, 1.0);
        other.times[0] = 2;
        assert!(matches!(summarize(&[mk(0, 1.0), other]), Err(HarnessError::GridMismatch(_))));
    }

    #[test]
    fn market_generation() {
        let spec = SyntheticMarket { n: 4, m: 6, rank: 1, noise: 0.0, seed: 9 };
        let v = raw_market(&spec, None).unwrap();
        for i in 1..4 {
            let r = v.get(i, 0) / v.get(0, 0);
            for j in 0..6 {
                assert!((v.get(i, j) - r * v.get(0, j)).abs() < 1e-12);
            }
        }
        let spec = SyntheticMarket { n: 30, m: 40, rank: 10, noise: 5.0, seed: 1 };
        let uni = ReferenceDistribution::uniform(40);
        let a = generate_market(&spec, &uni).unwrap();
        assert_eq!(a, generate_market(&spec, &uni).unwrap());
        for row in a.valuations().rows() {
            assert!(row.iter().any(|&x| x > 0.0));
            assert!((row.iter().sum::<f64>() / 40.0 - 1.0).abs() < 1e-12);
        }
        let bad = SyntheticMarket { rank: 7, ..SyntheticMarket { n: 4, m: 6, rank: 1, noise: 0.0, seed: 0 } };
        assert!(matches!(raw_market(&bad, None), Err(HarnessError::InvalidRank { rank: 7, max: 4 })));
    }

    #[test]
    fn toy_run_improves() {
        let cfg = toy_config();
        let out = run_experiment(&cfg, 2).unwrap();
        assert_eq!(out.series.len(), 2);
        for s in &out.series {
            let rel = s.get("rel_beta_hs").unwrap();
            assert!(rel.last().unwrap() < &rel[0]);
        }
    }

    #[test]
    fn forced_equal_seeds_give_zero_stderr() {
        let mut cfg = toy_config();
        cfg.force_equal_seeds = true;
        let out = run_experiment(&cfg, 2).unwrap();
        assert!(out.report.rows.iter().all(|r| r.stderr == Some(0.0)));
    }

    #[test]
    fn config_validation() {
        let mut cfg = toy_config();
        cfg.schema_version = 9;
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
        let mut cfg = toy_config();
        cfg.paths = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = toy_config();
        cfg.market = MarketSource::File { path: "/nonexistent/market.json".into() };
        assert!(cfg.validate().is_err());
        assert_eq!(toy_config().hash(), toy_config().hash());
    }

    #[test]
    fn csv_round_trip() {
        let out = run_experiment(&toy_config(), 1).unwrap();
        let mut buf = Vec::new();
        write_metrics_csv(&out.series, &mut buf).unwrap();
        assert!(buf.starts_with(b"model,path_id,metric,t,value\n"));
        assert_eq!(read_metrics_csv(buf.as_slice()).unwrap(), out.series);

        let mut buf = Vec::new();
        write_aggregate_csv(&out.report, &mut buf).unwrap();
        assert!(buf.starts_with(b"model,metric,t,mean,stderr\n"));
        assert_eq!(read_aggregate_csv(buf.as_slice()).unwrap(), out.report.rows);
    }
}
