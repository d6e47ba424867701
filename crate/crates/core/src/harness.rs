//! Experiment orchestration: replications over seeds, hyperparameter
//! selection on the validation split, method comparison and sweeps.
//!
//! Every (seed, method) cell is evaluated in-sample (train rows, which are
//! also the reference pool) and out-of-sample (test rows as evidence only).
//! Module errors are recorded in the cell and the run continues.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{BilevelQuantile, FourStepQuantile, QuantileConfig, TauGrid};
use crate::dataset::{
    load_csv, load_truth_csv, Arm, CsvSchema, Evidence, ObservationalDataset, PotentialOutcomeTable, Split,
    Standardizer,
};
use crate::error::{Error, Result};
use crate::estimator::{select_bandwidth, BandwidthSelection, CounterfactualEstimate, CounterfactualEstimator, LossProfile};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::metrics::{ate_error, pehe, policy_risk, ItePredictions};
use crate::propensity::{fit_logistic, override_propensity, LogisticConfig, Propensity, PropensityOverride, DEFAULT_CLIP};
use crate::simulator::{calibrate_beta, simulate, LogisticTruth, SimConfig, SimManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ours,
    OursWeighted,
    Bilevel,
    Fourstep,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::OursWeighted => "ours-weighted",
            Method::Bilevel => "bilevel",
            Method::Fourstep => "fourstep",
        }
    }

    fn uses_kernel(self) -> bool {
        matches!(self, Method::Ours | Method::OursWeighted)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ours" => Ok(Method::Ours),
            "ours-weighted" => Ok(Method::OursWeighted),
            "bilevel" => Ok(Method::Bilevel),
            "fourstep" => Ok(Method::Fourstep),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }
}

/// `oracle`, `logistic` or `scaled:c0,c1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PropensityChoice {
    Oracle,
    Logistic,
    Scaled(f64, f64),
}

impl FromStr for PropensityChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(PropensityChoice::Oracle),
            "logistic" => Ok(PropensityChoice::Logistic),
            _ => {
                let rest = s
                    .strip_prefix("scaled:")
                    .ok_or_else(|| Error::Config(format!("unknown propensity '{s}'")))?;
                let parts: Vec<&str> = rest.split(',').collect();
                let parse = |v: &str| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad scale factor '{v}'")))
                };
                match parts.as_slice() {
                    [a, b] => Ok(PropensityChoice::Scaled(parse(a)?, parse(b)?)),
                    _ => Err(Error::Config("scaled propensity needs two factors: scaled:c0,c1".into())),
                }
            }
        }
    }
}

impl TryFrom<String> for PropensityChoice {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PropensityChoice> for String {
    fn from(p: PropensityChoice) -> String {
        p.to_string()
    }
}

impl fmt::Display for PropensityChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PropensityChoice::Oracle => f.write_str("oracle"),
            PropensityChoice::Logistic => f.write_str("logistic"),
            PropensityChoice::Scaled(a, b) => write!(f, "scaled:{a},{b}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthColumns {
    pub y0: String,
    pub y1: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Sim,
    Csv {
        path: PathBuf,
        #[serde(default)]
        schema: CsvSchema,
        /// Ground-truth potential outcome columns in the same file.
        #[serde(default)]
        truth: Option<TruthColumns>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grids {
    pub bandwidths: Vec<f64>,
    pub kernels: Vec<KernelFamily>,
    pub tau_step: f64,
    pub quantile_iterations: usize,
    /// Validation rows scored per kernel candidate.
    pub max_validation_rows: usize,
}

impl Default for Grids {
    fn default() -> Self {
        Grids {
            bandwidths: vec![1.0, 3.0, 5.0, 7.0, 9.0],
            kernels: vec![KernelFamily::Gaussian, KernelFamily::Epanechnikov],
            tau_step: 0.05,
            quantile_iterations: QuantileConfig::default().iterations,
            max_validation_rows: 500,
        }
    }
}

impl Grids {
    pub fn kernel_candidates(&self) -> Result<Vec<KernelSpec>> {
        if self.bandwidths.is_empty() || self.kernels.is_empty() {
            return Err(Error::Config("bandwidth and kernel grids must be non-empty".into()));
        }
        let mut out = Vec::new();
        for &fam in &self.kernels {
            for &h in &self.bandwidths {
                out.push(KernelSpec::new(fam, h)?);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Pehe,
    Ate,
    PolicyRisk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentPlan {
    pub source: DataSource,
    /// Simulation settings; `seed` is replaced by each replication seed.
    /// `split_ratios` also splits CSV data that has no split column.
    pub sim_config: SimConfig,
    /// When set, `beta` is calibrated per seed so that the pooled Kendall
    /// tau of the potential outcomes hits this value.
    pub rank_target: Option<f64>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub grids: Grids,
    pub metrics: Vec<MetricName>,
    pub propensity: PropensityChoice,
    pub l2: f64,
    pub clip: f64,
    /// Standardize covariates with train-split moments (CSV sources).
    pub standardize: bool,
    /// Predict the factual arm by the model as well, instead of pairing
    /// the counterfactual with the observed outcome.
    pub predict_factual: bool,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            source: DataSource::Sim,
            sim_config: SimConfig::default(),
            rank_target: None,
            methods: vec![Method::Ours, Method::Fourstep],
            seeds: vec![0],
            grids: Grids::default(),
            metrics: vec![MetricName::Pehe, MetricName::Ate],
            propensity: PropensityChoice::Oracle,
            l2: LogisticConfig::default().l2,
            clip: DEFAULT_CLIP,
            standardize: false,
            predict_factual: false,
        }
    }
}

impl ExperimentPlan {
    /// Reads a JSON plan. Relative CSV paths resolve against the plan's
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut plan: ExperimentPlan = serde_json::from_str(&text)?;
        if let DataSource::Csv { path: p, .. } = &mut plan.source {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Validation("plan lists no seeds".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Validation("plan lists no methods".into()));
        }
        self.grids.kernel_candidates()?;
        TauGrid::with_step(self.grids.tau_step)?;
        if self.grids.quantile_iterations < 2 {
            return Err(Error::Config("quantile_iterations must be at least 2".into()));
        }
        if let Some(t) = self.rank_target {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config("rank_target must lie in (0, 1)".into()));
            }
        }
        let needs_oracle = !matches!(self.propensity, PropensityChoice::Logistic);
        if needs_oracle && matches!(self.source, DataSource::Csv { .. }) {
            return Err(Error::Config(format!("propensity '{}' needs simulated data", self.propensity)));
        }
        if needs_oracle && self.standardize {
            return Err(Error::Config("standardize is only supported with the logistic propensity".into()));
        }
        let mut cfg = self.sim_config.clone();
        if matches!(self.source, DataSource::Sim) {
            cfg.seed = self.seeds[0];
            cfg.validate()?;
        } else {
            cfg.split_ratios.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sample {
    In,
    Out,
}

impl Sample {
    pub fn as_str(self) -> &'static str {
        match self {
            Sample::In => "in",
            Sample::Out => "out",
        }
    }

    fn split(self) -> Split {
        match self {
            Sample::In => Split::Train,
            Sample::Out => Split::Test,
        }
    }
}

/// One (seed, method, sample) row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub seed: u64,
    pub method: Method,
    pub sample: Sample,
    pub n_units: usize,
    pub n_failed: usize,
    pub n_unbounded: usize,
    pub kernel: Option<KernelSpec>,
    /// Validation score of the selected kernel.
    pub val_score: Option<f64>,
    pub sqrt_pehe: Option<f64>,
    pub eps_ate: Option<f64>,
    pub policy_risk: Option<f64>,
    /// Metrics divided by the standard deviation of train outcomes.
    pub sqrt_pehe_std: Option<f64>,
    pub eps_ate_std: Option<f64>,
    /// `ok`, `partial` (some queries failed) or `failed: <message>`.
    pub status: String,
}

impl CellResult {
    fn failed(seed: u64, method: Method, sample: Sample, err: &Error) -> Self {
        CellResult {
            seed,
            method,
            sample,
            n_units: 0,
            n_failed: 0,
            n_unbounded: 0,
            kernel: None,
            val_score: None,
            sqrt_pehe: None,
            eps_ate: None,
            policy_risk: None,
            sqrt_pehe_std: None,
            eps_ate_std: None,
            status: format!("failed: {err}"),
        }
    }

    pub fn is_failed(&self) -> bool {
        self.status.starts_with("failed")
    }

    fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "sqrt_pehe" => self.sqrt_pehe,
            "eps_ate" => self.eps_ate,
            "policy_risk" => self.policy_risk,
            "sqrt_pehe_std" => self.sqrt_pehe_std,
            "eps_ate_std" => self.eps_ate_std,
            _ => None,
        }
    }
}

pub const SUMMARY_METRICS: [&str; 5] = ["sqrt_pehe", "eps_ate", "policy_risk", "sqrt_pehe_std", "eps_ate_std"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub sample: Sample,
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation over seeds (0 for a single seed).
    pub std: f64,
    pub n_seeds: usize,
    /// `mean ± std` with two decimals.
    pub cell: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticSummary {
    pub iterations: usize,
    pub converged: bool,
    pub separated: bool,
    pub weights: Vec<f64>,
    pub intercept: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedManifest {
    pub seed: u64,
    pub simulation: Option<SimManifest>,
    pub propensity_fit: Option<LogisticSummary>,
    pub selection: Option<BandwidthSelection>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub plan: ExperimentPlan,
    pub selection_criterion: String,
    pub seeds: Vec<SeedManifest>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub rows: Vec<CellResult>,
    pub summary: Vec<SummaryRow>,
    pub manifest: RunManifest,
}

/// Data and fitted nuisance objects for one replication.
struct SeedContext {
    full: ObservationalDataset,
    truth: Option<PotentialOutcomeTable>,
    propensity: Box<dyn Propensity>,
    manifest: SeedManifest,
    y_scale: f64,
}

fn load_source(plan: &ExperimentPlan, seed: u64) -> Result<(ObservationalDataset, Option<PotentialOutcomeTable>, Option<SimManifest>, Option<LogisticTruth>)> {
    match &plan.source {
        DataSource::Sim => {
            let mut cfg = plan.sim_config.clone();
            cfg.seed = seed;
            if let Some(target) = plan.rank_target {
                cfg.beta = calibrate_beta(&cfg, target, 100_000)?;
                log::info!("seed {seed}: beta {} for pooled tau {target}", cfg.beta);
            }
            let sim = simulate(&cfg)?;
            Ok((sim.dataset, Some(sim.truth), Some(sim.manifest), Some(sim.propensity)))
        }
        DataSource::Csv { path, schema, truth } => {
            let mut schema = schema.clone();
            if let Some(t) = truth {
                schema.exclude.extend([t.y0.clone(), t.y1.clone()]);
            }
            let mut ds = load_csv(path, &schema)?;
            let table = match truth {
                Some(t) => Some(load_truth_csv(path, &t.y0, &t.y1)?),
                None => None,
            };
            if ds.indices_of(Split::Val).is_empty() && ds.indices_of(Split::Test).is_empty() {
                let labels = plan.sim_config.split_ratios.assign(ds.len(), seed)?;
                ds = ds.with_splits(labels)?;
            }
            Ok((ds, table, None, None))
        }
    }
}

fn prepare_seed(plan: &ExperimentPlan, seed: u64) -> Result<SeedContext> {
    let (mut full, truth, simulation, oracle) = load_source(plan, seed)?;
    if plan.standardize {
        full = full.standardized(&Standardizer::fit(&full))?;
    }
    let mut propensity_fit = None;
    let propensity: Box<dyn Propensity> = match plan.propensity {
        PropensityChoice::Logistic => {
            let fit = fit_logistic(&full, &LogisticConfig { l2: plan.l2, clip: plan.clip, ..LogisticConfig::default() })?;
            propensity_fit = Some(LogisticSummary {
                iterations: fit.iterations,
                converged: fit.converged,
                separated: fit.separated,
                weights: fit.model.weights.clone(),
                intercept: fit.model.intercept,
            });
            Box::new(fit.model)
        }
        PropensityChoice::Oracle => Box::new(oracle.ok_or_else(|| Error::Config("oracle propensity needs simulated data".into()))?),
        PropensityChoice::Scaled(c0, c1) => {
            let truth_pi = oracle.ok_or_else(|| Error::Config("scaled propensity needs simulated data".into()))?;
            let scaled = override_propensity(truth_pi, PropensityOverride::scaled(c0, c1))?;
            scaled.check_probes(&full);
            Box::new(scaled)
        }
    };
    let train_y: Vec<f64> = full.indices_of(Split::Train).iter().map(|&i| full.outcome(i)).collect();
    if train_y.is_empty() {
        return Err(Error::Validation("train split is empty".into()));
    }
    let mu = train_y.iter().sum::<f64>() / train_y.len() as f64;
    let var = train_y.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / train_y.len() as f64;
    let y_scale = if var > 0.0 { var.sqrt() } else { 1.0 };
    Ok(SeedContext {
        full,
        truth,
        propensity,
        manifest: SeedManifest { seed, simulation, propensity_fit, selection: None, error: None },
        y_scale,
    })
}

/// Per-unit predictions for one sample: counterfactual and (optionally)
/// model-based factual outcome, or the error that prevented them.
type UnitPrediction = Result<(CounterfactualEstimate, Option<f64>)>;

fn plain(y: f64) -> CounterfactualEstimate {
    CounterfactualEstimate { y_hat: y, loss_at_min: f64::NAN, n_effective_target_arm: f64::NAN, bounded: true, coverage_ok: true }
}

/// Own-arm weighted median from the target-arm term of a pseudo-query.
fn own_arm_median(est: &CounterfactualEstimator<'_>, ev: &Evidence) -> Result<f64> {
    let pseudo = Evidence { x: ev.x_prime, z: ev.z.clone(), y: ev.y, x_prime: ev.x };
    let p = est.profile(&pseudo)?;
    Ok(LossProfile::new(p.knots().to_vec(), p.weights().to_vec(), 0.0)?.minimize().y_hat)
}

fn median_level(grid: &TauGrid) -> usize {
    let levels = grid.levels();
    let mut best = 0;
    for (j, t) in levels.iter().enumerate() {
        if (t - 0.5).abs() < (levels[best] - 0.5).abs() {
            best = j;
        }
    }
    best
}

enum Fitted<'a> {
    Kernel(CounterfactualEstimator<'a>, bool),
    Bilevel(BilevelQuantile),
    Fourstep(FourStepQuantile),
}

impl Fitted<'_> {
    fn predict(&self, ev: &Evidence, with_factual: bool) -> UnitPrediction {
        match self {
            Fitted::Kernel(est, weighted) => {
                let cf = if *weighted { est.profile_kernel_ratio(ev)?.minimize() } else { est.estimate(ev)? };
                let fact = if with_factual { Some(own_arm_median(est, ev)?) } else { None };
                Ok((cf, fact))
            }
            Fitted::Bilevel(m) => {
                let fact = if with_factual {
                    let j = median_level(&m.grid);
                    let mut feat = vec![ev.x];
                    feat.extend_from_slice(&ev.z);
                    Some(m.models[j].predict(&feat))
                } else {
                    None
                };
                Ok((plain(m.estimate(ev)?), fact))
            }
            Fitted::Fourstep(m) => {
                let fact = if with_factual {
                    let j = median_level(&m.grid);
                    let arm = Arm::from_code(ev.x).expect("checked binary");
                    Some(m.models[arm.index()][j].predict(&ev.z))
                } else {
                    None
                };
                Ok((plain(m.estimate(ev)?), fact))
            }
        }
    }
}

fn evaluate_sample(
    plan: &ExperimentPlan,
    ctx: &SeedContext,
    fitted: &Fitted<'_>,
    method: Method,
    sample: Sample,
    kernel: Option<KernelSpec>,
    val_score: Option<f64>,
) -> Result<CellResult> {
    let rows = ctx.full.indices_of(sample.split());
    if rows.is_empty() {
        return Err(Error::Validation(format!("split '{}' is empty", sample.split())));
    }
    let evs: Vec<Evidence> = rows
        .iter()
        .map(|&i| {
            let arm = ctx.full.arm(i).ok_or_else(|| Error::Precondition("binary treatments required".into()))?;
            Ok(ctx.full.evidence(i, arm.other().code()))
        })
        .collect::<Result<_>>()?;
    let preds: Vec<UnitPrediction> = evs.par_iter().map(|ev| fitted.predict(ev, plan.predict_factual)).collect();

    let mut ok_rows = Vec::new();
    let mut arms = Vec::new();
    let mut factual = Vec::new();
    let mut counterfactual = Vec::new();
    let mut n_failed = 0;
    let mut n_unbounded = 0;
    let mut first_error = None;
    for ((&i, ev), p) in rows.iter().zip(&evs).zip(preds) {
        match p {
            Ok((est, fact)) => {
                if !est.bounded {
                    n_unbounded += 1;
                }
                ok_rows.push(i);
                arms.push(Arm::from_code(ev.x).expect("binary"));
                factual.push(fact.unwrap_or(ev.y));
                counterfactual.push(est.y_hat);
            }
            Err(e) => {
                n_failed += 1;
                first_error.get_or_insert(e);
            }
        }
    }
    if ok_rows.is_empty() {
        return Err(first_error.unwrap_or_else(|| Error::Coverage("no unit could be estimated".into())));
    }
    let pred = ItePredictions::from_factual(&arms, &factual, &counterfactual)?;
    let observed: Vec<f64> = ok_rows.iter().map(|&i| ctx.full.outcome(i)).collect();
    let mut cell = CellResult {
        seed: ctx.manifest.seed,
        method,
        sample,
        n_units: rows.len(),
        n_failed,
        n_unbounded,
        kernel,
        val_score,
        sqrt_pehe: None,
        eps_ate: None,
        policy_risk: None,
        sqrt_pehe_std: None,
        eps_ate_std: None,
        status: if n_failed == 0 { "ok".into() } else { "partial".into() },
    };
    if let Some(truth) = &ctx.truth {
        let sub = truth.select(&ok_rows);
        if plan.metrics.contains(&MetricName::Pehe) {
            let v = pehe(&pred, &sub)?.sqrt();
            cell.sqrt_pehe = Some(v);
            cell.sqrt_pehe_std = Some(v / ctx.y_scale);
        }
        if plan.metrics.contains(&MetricName::Ate) {
            let v = ate_error(&pred, &sub)?;
            cell.eps_ate = Some(v);
            cell.eps_ate_std = Some(v / ctx.y_scale);
        }
        if let (Some(a), Some(p)) = (cell.eps_ate, cell.sqrt_pehe) {
            if a > p * (1.0 + 1e-12) + 1e-12 {
                log::error!("seed {} {method}: eps_ate {a} exceeds sqrt pehe {p}", cell.seed);
            }
        }
    }
    if plan.metrics.contains(&MetricName::PolicyRisk) {
        let r = policy_risk(&pred, &arms, &observed)?;
        cell.policy_risk = Some(r.risk);
        if r.empty_cell {
            cell.status = format!("{} (empty policy cell)", cell.status);
        }
    }
    Ok(cell)
}

fn run_method(plan: &ExperimentPlan, ctx: &SeedContext, pool: &ObservationalDataset, method: Method, selection: Option<&BandwidthSelection>) -> Vec<CellResult> {
    let seed = ctx.manifest.seed;
    let prop = ctx.propensity.as_ref();
    let fitted: Result<(Fitted<'_>, Option<KernelSpec>, Option<f64>)> = (|| match method {
        Method::Ours | Method::OursWeighted => {
            let sel = selection.ok_or_else(|| Error::Config("kernel selection missing".into()))?;
            let score = sel.scores.iter().find(|(k, _)| *k == sel.kernel).and_then(|(_, s)| *s);
            let est = CounterfactualEstimator::new(pool, sel.kernel, prop)?;
            Ok((Fitted::Kernel(est, method == Method::OursWeighted), Some(sel.kernel), score))
        }
        Method::Bilevel => {
            let cfg = QuantileConfig { iterations: plan.grids.quantile_iterations, ..QuantileConfig::default() };
            let grid = TauGrid::with_step(plan.grids.tau_step)?;
            Ok((Fitted::Bilevel(BilevelQuantile::fit(pool, &grid, &cfg)?), None, None))
        }
        Method::Fourstep => {
            let cfg = QuantileConfig { iterations: plan.grids.quantile_iterations, ..QuantileConfig::default() };
            let grid = TauGrid::with_step(plan.grids.tau_step)?;
            Ok((Fitted::Fourstep(FourStepQuantile::fit(pool, &grid, prop, &cfg)?), None, None))
        }
    })();
    let samples = [Sample::In, Sample::Out];
    match fitted {
        Err(e) => samples.iter().map(|&s| CellResult::failed(seed, method, s, &e)).collect(),
        Ok((fitted, kernel, score)) => samples
            .iter()
            .map(|&s| {
                evaluate_sample(plan, ctx, &fitted, method, s, kernel, score)
                    .unwrap_or_else(|e| CellResult::failed(seed, method, s, &e))
            })
            .collect(),
    }
}

fn run_seed(plan: &ExperimentPlan, seed: u64) -> (Vec<CellResult>, SeedManifest) {
    let fail_all = |e: Error| {
        let rows = plan
            .methods
            .iter()
            .flat_map(|&m| [Sample::In, Sample::Out].map(|s| CellResult::failed(seed, m, s, &e)))
            .collect();
        let manifest = SeedManifest { seed, simulation: None, propensity_fit: None, selection: None, error: Some(e.to_string()) };
        (rows, manifest)
    };
    let mut ctx = match prepare_seed(plan, seed) {
        Ok(c) => c,
        Err(e) => return fail_all(e),
    };
    let pool = match ctx.full.split_view(Split::Train) {
        Ok(p) => p,
        Err(e) => return fail_all(e),
    };
    let selection: Option<Result<BandwidthSelection>> = plan.methods.iter().any(|m| m.uses_kernel()).then(|| {
        let candidates = plan.grids.kernel_candidates()?;
        let est = CounterfactualEstimator::new(&pool, candidates[0], ctx.propensity.as_ref())?;
        match ctx.full.split_view(Split::Val) {
            Ok(val) => select_bandwidth(&est, &val, &candidates, plan.grids.max_validation_rows),
            Err(_) => {
                log::warn!("seed {seed}: empty validation split, using {}", candidates[0]);
                Ok(BandwidthSelection { kernel: candidates[0], scores: vec![(candidates[0], None)] })
            }
        }
    });
    let mut rows = Vec::new();
    for &method in &plan.methods {
        let sel = match (&selection, method.uses_kernel()) {
            (Some(Err(e)), true) => {
                let err = Error::Coverage(format!("kernel selection failed: {e}"));
                rows.extend([Sample::In, Sample::Out].map(|s| CellResult::failed(seed, method, s, &err)));
                continue;
            }
            (Some(Ok(s)), true) => Some(s),
            _ => None,
        };
        log::info!("seed {seed}: {method}");
        rows.extend(run_method(plan, &ctx, &pool, method, sel));
    }
    ctx.manifest.selection = selection.and_then(|s| s.ok());
    (rows, ctx.manifest)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (mean, std)
}

/// Mean and sample standard deviation over seeds of every reported metric,
/// in plan method order.
pub fn summarize(rows: &[CellResult], methods: &[Method]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for &method in methods {
        for sample in [Sample::In, Sample::Out] {
            for metric in SUMMARY_METRICS {
                let vals: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.method == method && r.sample == sample && !r.is_failed())
                    .filter_map(|r| r.metric(metric))
                    .collect();
                if vals.is_empty() {
                    continue;
                }
                let (mean, std) = mean_std(&vals);
                out.push(SummaryRow {
                    method,
                    sample,
                    metric: metric.to_string(),
                    mean,
                    std,
                    n_seeds: vals.len(),
                    cell: format!("{mean:.2} ± {std:.2}"),
                });
            }
        }
    }
    out
}

pub fn run_experiment(plan: &ExperimentPlan) -> Result<ExperimentOutput> {
    plan.validate()?;
    let per_seed: Vec<(Vec<CellResult>, SeedManifest)> = plan.seeds.par_iter().map(|&s| run_seed(plan, s)).collect();
    let mut rows = Vec::new();
    let mut seeds = Vec::new();
    for (r, m) in per_seed {
        rows.extend(r);
        seeds.push(m);
    }
    let summary = summarize(&rows, &plan.methods);
    Ok(ExperimentOutput {
        rows,
        summary,
        manifest: RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            plan: plan.clone(),
            selection_criterion: "validation CRPS of factual outcomes under the kernel-weighted own-arm law".into(),
            seeds,
        },
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const RESULT_COLUMNS: [&str; 15] = [
    "seed",
    "method",
    "sample",
    "n_units",
    "n_failed",
    "n_unbounded",
    "kernel",
    "bandwidth",
    "val_score",
    "sqrt_pehe",
    "eps_ate",
    "policy_risk",
    "sqrt_pehe_std",
    "eps_ate_std",
    "status",
];

fn result_record(r: &CellResult) -> Vec<String> {
    vec![
        r.seed.to_string(),
        r.method.to_string(),
        r.sample.as_str().to_string(),
        r.n_units.to_string(),
        r.n_failed.to_string(),
        r.n_unbounded.to_string(),
        r.kernel.map(|k| k.family().to_string()).unwrap_or_default(),
        opt(r.kernel.map(|k| k.bandwidth())),
        opt(r.val_score),
        opt(r.sqrt_pehe),
        opt(r.eps_ate),
        opt(r.policy_risk),
        opt(r.sqrt_pehe_std),
        opt(r.eps_ate_std),
        r.status.clone(),
    ]
}

fn result_header() -> Vec<&'static str> {
    RESULT_COLUMNS.to_vec()
}

fn summary_record(s: &SummaryRow) -> Vec<String> {
    vec![
        s.method.to_string(),
        s.sample.as_str().to_string(),
        s.metric.clone(),
        s.mean.to_string(),
        s.std.to_string(),
        s.n_seeds.to_string(),
        s.cell.clone(),
    ]
}

const SUMMARY_HEADER: [&str; 7] = ["method", "sample", "metric", "mean", "std", "n_seeds", "cell"];

pub fn write_results_csv<W: Write>(rows: &[CellResult], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(result_header())?;
    for r in rows {
        wr.write_record(result_record(r))?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(SUMMARY_HEADER)?;
    for r in rows {
        wr.write_record(summary_record(r))?;
    }
    wr.flush()?;
    Ok(())
}

/// Writes `results.csv`, `summary.csv` and `manifest.json` into `dir`.
pub fn write_outputs(out: &ExperimentOutput, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_results_csv(&out.rows, std::fs::File::create(dir.join("results.csv"))?)?;
    write_summary_csv(&out.summary, std::fs::File::create(dir.join("summary.csv"))?)?;
    let json = serde_json::to_string_pretty(&out.manifest)?;
    std::fs::write(dir.join("manifest.json"), json + "\n")?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Alpha,
    Bandwidth,
    Kernel,
    Rho,
    Beta,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Alpha => "alpha",
            SweepAxis::Bandwidth => "bandwidth",
            SweepAxis::Kernel => "kernel",
            SweepAxis::Rho => "rho",
            SweepAxis::Beta => "beta",
        }
    }

    /// Plan with this axis set to `value`.
    pub fn apply(self, base: &ExperimentPlan, value: &str) -> Result<ExperimentPlan> {
        let mut plan = base.clone();
        let num = || value.parse::<f64>().map_err(|_| Error::Config(format!("'{value}' is not a number")));
        match self {
            SweepAxis::Alpha => plan.sim_config.alpha = num()?,
            SweepAxis::Rho => plan.sim_config.rho = num()?,
            SweepAxis::Beta => {
                plan.sim_config.beta = num()?;
                plan.rank_target = None;
            }
            SweepAxis::Bandwidth => plan.grids.bandwidths = vec![num()?],
            SweepAxis::Kernel => plan.grids.kernels = vec![value.parse()?],
        }
        Ok(plan)
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepAxis::Alpha),
            "bandwidth" => Ok(SweepAxis::Bandwidth),
            "kernel" => Ok(SweepAxis::Kernel),
            "rho" => Ok(SweepAxis::Rho),
            "beta" => Ok(SweepAxis::Beta),
            other => Err(Error::Config(format!("unknown sweep axis '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: String,
    pub output: ExperimentOutput,
}

/// Runs the base plan once per axis value. All plans are validated before
/// anything runs.
pub fn sweep(axis: SweepAxis, values: &[String], base: &ExperimentPlan) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(Error::Validation("sweep needs at least one value".into()));
    }
    let plans = values
        .iter()
        .map(|v| {
            let p = axis.apply(base, v)?;
            p.validate()?;
            Ok((v.clone(), p))
        })
        .collect::<Result<Vec<_>>>()?;
    plans
        .into_iter()
        .map(|(value, p)| Ok(SweepPoint { value, output: run_experiment(&p)? }))
        .collect()
}

/// Long format: `axis, value` followed by the results columns.
pub fn write_sweep_csv<W: Write>(axis: SweepAxis, points: &[SweepPoint], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["axis", "value"];
    header.extend(result_header());
    wr.write_record(&header)?;
    for p in points {
        for r in &p.output.rows {
            let mut rec = vec![axis.as_str().to_string(), p.value.clone()];
            rec.extend(result_record(r));
            wr.write_record(&rec)?;
        }
    }
    wr.flush()?;
    Ok(())
}

pub fn write_sweep_summary_csv<W: Write>(axis: SweepAxis, points: &[SweepPoint], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["axis", "value"];
    header.extend(SUMMARY_HEADER);
    wr.write_record(&header)?;
    for p in points {
        for s in &p.output.summary {
            let mut rec = vec![axis.as_str().to_string(), p.value.clone()];
            rec.extend(summary_record(s));
            wr.write_record(&rec)?;
        }
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_plan() -> ExperimentPlan {
        ExperimentPlan {
            sim_config: SimConfig { m: 2, n: 400, ..SimConfig::default() },
            methods: vec![Method::Ours, Method::OursWeighted, Method::Bilevel, Method::Fourstep],
            seeds: vec![1, 2],
            grids: Grids { bandwidths: vec![0.5, 1.0], quantile_iterations: 200, max_validation_rows: 40, ..Grids::default() },
            metrics: vec![MetricName::Pehe, MetricName::Ate, MetricName::PolicyRisk],
            ..ExperimentPlan::default()
        }
    }

    #[test]
    fn runs_every_cell() {
        let out = run_experiment(&small_plan()).unwrap();
        assert_eq!(out.rows.len(), 2 * 4 * 2);
        for r in &out.rows {
            assert!(!r.is_failed(), "{r:?}");
            let (a, p) = (r.eps_ate.unwrap(), r.sqrt_pehe.unwrap());
            assert!(a <= p + 1e-12);
        }
        assert_eq!(out.manifest.seeds.len(), 2);
        assert!(out.manifest.seeds[0].selection.is_some());
    }

    #[test]
    fn aggregates_recomputed() {
        let out = run_experiment(&small_plan()).unwrap();
        for s in &out.summary {
            let vals: Vec<f64> = out
                .rows
                .iter()
                .filter(|r| r.method == s.method && r.sample == s.sample)
                .map(|r| r.metric(&s.metric).unwrap())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (vals.len() as f64 - 1.0);
            assert!((s.mean - mean).abs() < 1e-12);
            assert!((s.std - var.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_csv() {
        let a = run_experiment(&small_plan()).unwrap();
        let b = run_experiment(&small_plan()).unwrap();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        write_results_csv(&a.rows, &mut x).unwrap();
        write_results_csv(&b.rows, &mut y).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn zero_seeds_rejected() {
        let plan = ExperimentPlan { seeds: vec![], ..small_plan() };
        assert!(matches!(run_experiment(&plan), Err(Error::Validation(_))));
    }

    #[test]
    fn coverage_failures_become_flagged_cells() {
        let plan = ExperimentPlan {
            methods: vec![Method::Ours, Method::Fourstep],
            grids: Grids { bandwidths: vec![1e-6], kernels: vec![KernelFamily::Epanechnikov], quantile_iterations: 50, ..Grids::default() },
            seeds: vec![3],
            ..small_plan()
        };
        let out = run_experiment(&plan).unwrap();
        let ours: Vec<_> = out.rows.iter().filter(|r| r.method == Method::Ours).collect();
        assert!(ours.iter().all(|r| r.is_failed()));
        assert!(out.rows.iter().filter(|r| r.method == Method::Fourstep).all(|r| !r.is_failed()));
    }

    #[test]
    fn plan_json_round_trip() {
        let plan = ExperimentPlan { propensity: PropensityChoice::Scaled(0.5, 2.0), ..small_plan() };
        let text = serde_json::to_string(&plan).unwrap();
        let back: ExperimentPlan = serde_json::from_str(&text).unwrap();
        assert_eq!(plan, back);
        let parsed: ExperimentPlan = serde_json::from_str(r#"{"methods": ["ours-weighted"], "propensity": "logistic"}"#).unwrap();
        assert_eq!(parsed.methods, vec![Method::OursWeighted]);
        assert!(serde_json::from_str::<ExperimentPlan>(r#"{"bogus": 1}"#).is_err());
        assert!(serde_json::from_str::<ExperimentPlan>(r#"{"propensity": "scaled:1"}"#).is_err());
    }

    #[test]
    fn sweep_axes() {
        let base = ExperimentPlan { methods: vec![Method::Fourstep], seeds: vec![1], ..small_plan() };
        let pts = sweep(SweepAxis::Alpha, &["1".into(), "2".into()], &base).unwrap();
        assert_eq!(pts.len(), 2);
        let mut buf = Vec::new();
        write_sweep_csv(SweepAxis::Alpha, &pts, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 2);
        assert!(SweepAxis::Kernel.apply(&base, "cosine").is_err());
        assert_eq!(SweepAxis::Kernel.apply(&base, "gaussian").unwrap().grids.kernels, vec![KernelFamily::Gaussian]);
    }

    #[test]
    fn csv_source_with_and_without_truth() {
        let dir = tempfile::tempdir().unwrap();
        let sim = simulate(&SimConfig { m: 2, n: 300, seed: 4, ..SimConfig::default() }).unwrap();
        let mut text = String::from("t,y,a,b,mu0,mu1\n");
        for i in 0..sim.dataset.len() {
            let z = sim.dataset.z(i);
            text += &format!(
                "{},{},{},{},{},{}\n",
                sim.dataset.treatment(i),
                sim.dataset.outcome(i),
                z[0],
                z[1],
                sim.truth.y0[i],
                sim.truth.y1[i]
            );
        }
        let path = dir.path().join("data.csv");
        std::fs::write(&path, text).unwrap();
        let schema = CsvSchema { treatment: "t".into(), outcome: "y".into(), split: None, ..CsvSchema::default() };
        let plan = ExperimentPlan {
            source: DataSource::Csv { path: path.clone(), schema: schema.clone(), truth: Some(TruthColumns { y0: "mu0".into(), y1: "mu1".into() }) },
            propensity: PropensityChoice::Logistic,
            methods: vec![Method::Ours],
            seeds: vec![1],
            ..small_plan()
        };
        let out = run_experiment(&plan).unwrap();
        assert!(out.rows.iter().all(|r| r.sqrt_pehe.is_some()), "{:?}", out.rows);
        let no_truth = ExperimentPlan { source: DataSource::Csv { path, schema, truth: None }, metrics: vec![MetricName::Pehe], ..plan };
        let out = run_experiment(&no_truth).unwrap();
        assert!(out.rows.iter().all(|r| r.sqrt_pehe.is_none() && r.val_score.is_some()));
        let oracle = ExperimentPlan { propensity: PropensityChoice::Oracle, ..no_truth };
        assert!(matches!(run_experiment(&oracle), Err(Error::Config(_))));
    }

    #[test]
    fn factual_prediction_mode() {
        let plan = ExperimentPlan { predict_factual: true, seeds: vec![1], ..small_plan() };
        let out = run_experiment(&plan).unwrap();
        assert!(out.rows.iter().all(|r| !r.is_failed()), "{:?}", out.rows);
    }
}
