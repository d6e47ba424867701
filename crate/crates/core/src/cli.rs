//! Command-line interface of the `rankcf` binary.
//!
//! Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.

use std::ffi::OsString;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::baselines::{BilevelQuantile, FourStepQuantile, QuantileConfig, TauGrid};
use crate::dataset::{column_index, load_csv, parse_cell, SplitRatios, Standardizer, write_csv, write_truth_csv, CsvSchema, Evidence, ObservationalDataset, Split, TreatmentMode};
use crate::error::{Error, Result};
use crate::estimator::{select_bandwidth, CounterfactualEstimator};
use crate::harness::{run_experiment, CellResult, DataSource, sweep, write_outputs, write_sweep_csv, write_sweep_summary_csv, ExperimentPlan, PropensityChoice, SweepAxis};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::propensity::{fit_logistic, override_propensity, LogisticConfig, Propensity, PropensityOverride, DEFAULT_CLIP};
use crate::rank::{binned_kendall, kendall_fast};
use crate::simulator::{calibrate_beta, simulate, LogisticTruth, SimConfig, SimManifest};

const AFTER_HELP: &str = "Settings given as flags take precedence over the plan file, which takes precedence over built-in defaults. Environment variables are not read.";

#[derive(Debug, Parser)]
#[command(name = "rankcf", version, about = "Counterfactual outcome estimation under rank preservation", after_help = AFTER_HELP)]
pub struct Cli {
    /// Print errors as JSON on stderr.
    #[arg(long, global = true)]
    pub json: bool,
    /// Worker threads for parallel loops (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Log level: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with known potential outcomes.
    Simulate(SimulateArgs),
    /// Estimate counterfactual outcomes for a file of queries.
    Estimate(EstimateArgs),
    /// Run a quantile-regression baseline on a file of queries.
    Baseline(BaselineArgs),
    /// Kendall rank correlation, optionally binned by a third column.
    RankCheck(RankCheckArgs),
    /// Run an experiment plan.
    Run(RunArgs),
    /// Repeat an experiment plan over values of one axis.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 10)]
    pub m: usize,
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 2.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.0)]
    pub rho: f64,
    #[arg(long, default_value_t = 0.0)]
    pub beta: f64,
    /// Calibrate beta so the pooled Kendall tau of (Y0, Y1) hits this value.
    #[arg(long)]
    pub rank_target: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for dataset.csv, truth.csv and manifest.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset CSV; train rows form the reference pool.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Queries CSV with columns x, covariates, y, x_prime.
    #[arg(long)]
    pub queries: PathBuf,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "x")]
    pub treatment_col: String,
    #[arg(long, default_value = "y")]
    pub outcome_col: String,
    #[arg(long, default_value = "split")]
    pub split_col: String,
    /// oracle (needs --manifest), logistic or scaled:c0,c1.
    #[arg(long, default_value = "logistic")]
    pub propensity: String,
    /// Simulation manifest holding the true propensity weights.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-4)]
    pub l2: f64,
    #[arg(long, default_value_t = DEFAULT_CLIP)]
    pub clip: f64,
    /// Standardize covariates with train-split mean and sd before fitting.
    #[arg(long)]
    pub standardize: bool,
    /// Seed for the train/val/test assignment when the dataset has no val rows.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "gaussian")]
    pub kernel: String,
    #[arg(long, default_value_t = 1.0)]
    pub bandwidth: f64,
    /// Choose kernel and bandwidth on the validation split.
    #[arg(long)]
    pub select: bool,
    /// Bandwidth grid for --select, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,3,5,7,9")]
    pub bandwidths: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// bilevel or fourstep.
    #[arg(long)]
    pub method: String,
    #[arg(long, default_value_t = 0.05)]
    pub tau_step: f64,
    #[arg(long, default_value_t = 20_000)]
    pub iterations: usize,
}

#[derive(Debug, Args)]
pub struct RankCheckArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub x: String,
    #[arg(long)]
    pub y: String,
    /// Conditioning column for binned coefficients.
    #[arg(long)]
    pub by: Option<String>,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub plan: PathBuf,
    /// Replaces the plan's seed list with this single seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for results.csv, summary.csv and manifest.json.
    #[arg(long, default_value = "results")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub plan: PathBuf,
    /// alpha, bandwidth, kernel, rho or beta.
    #[arg(long)]
    pub axis: String,
    /// Comma-separated axis values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "sweep")]
    pub out: PathBuf,
}

/// Parses `args` (including the program name), runs the command and
/// returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let _ = env_logger::Builder::new().parse_filters(&cli.log_level).format_timestamp(None).try_init();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    match dispatch(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let code = if e.is_input_error() { 1 } else { 2 };
            if cli.json {
                eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string(), "exit_code": code }));
            } else {
                eprintln!("error: {e}");
            }
            code
        }
    }
}

fn dispatch(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::RankCheck(a) => cmd_rank_check(a),
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let mut cfg = SimConfig { m: a.m, n: a.n, alpha: a.alpha, rho: a.rho, beta: a.beta, seed: a.seed, ..SimConfig::default() };
    cfg.validate()?;
    if let Some(t) = a.rank_target {
        cfg.beta = calibrate_beta(&cfg, t, 100_000)?;
    }
    let sim = simulate(&cfg)?;
    std::fs::create_dir_all(&a.out)?;
    write_csv(&sim.dataset, a.out.join("dataset.csv"))?;
    write_truth_csv(&sim.truth, a.out.join("truth.csv"))?;
    std::fs::write(a.out.join("manifest.json"), serde_json::to_string_pretty(&sim.manifest)? + "\n")?;
    Ok(())
}

/// Loads the dataset and queries, re-splitting when no val rows exist
/// and applying the train-split standardizer when requested.
fn prepare(d: &DataArgs) -> Result<(ObservationalDataset, Vec<Evidence>)> {
    let mut ds = load_dataset(d)?;
    let mut queries = load_queries(&d.queries, &ds.names().covariates)?;
    if ds.indices_of(Split::Val).is_empty() {
        ds = ds.with_splits(SplitRatios::default().assign(ds.len(), d.seed)?)?;
    }
    if d.standardize {
        if !d.propensity.starts_with("logistic") {
            return Err(Error::Config("--standardize only works with the logistic propensity".into()));
        }
        let scaler = Standardizer::fit(&ds);
        ds = ds.standardized(&scaler)?;
        for q in &mut queries {
            q.z = scaler.apply(&q.z);
        }
    }
    Ok((ds, queries))
}

fn load_dataset(d: &DataArgs) -> Result<ObservationalDataset> {
    let schema = CsvSchema {
        treatment: d.treatment_col.clone(),
        outcome: d.outcome_col.clone(),
        covariates: None,
        split: Some(d.split_col.clone()),
        mode: TreatmentMode::Binary,
        exclude: Vec::new(),
    };
    load_csv(&d.dataset, &schema)
}

/// Queries use the dataset's covariate names plus `x`, `y` and `x_prime`.
pub fn load_queries(path: &Path, covariates: &[String]) -> Result<Vec<Evidence>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let ix = column_index(&headers, "x")?;
    let iy = column_index(&headers, "y")?;
    let ip = column_index(&headers, "x_prime")?;
    let iz = covariates.iter().map(|c| column_index(&headers, c)).collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        let z = iz.iter().zip(covariates).map(|(&i, c)| parse_cell(&rec, i, row, c)).collect::<Result<Vec<_>>>()?;
        out.push(Evidence::new(parse_cell(&rec, ix, row, "x")?, z, parse_cell(&rec, iy, row, "y")?, parse_cell(&rec, ip, row, "x_prime")?)?);
    }
    if out.is_empty() {
        return Err(Error::Validation("queries file has no rows".into()));
    }
    Ok(out)
}

fn build_propensity(d: &DataArgs, ds: &ObservationalDataset) -> Result<Box<dyn Propensity>> {
    let choice: PropensityChoice = d.propensity.parse()?;
    let oracle = || -> Result<LogisticTruth> {
        let path = d
            .manifest
            .as_ref()
            .ok_or_else(|| Error::Config(format!("propensity '{choice}' needs --manifest")))?;
        let m: SimManifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if m.w_x.len() != ds.dim() {
            return Err(Error::Alignment("manifest dimension does not match the dataset".into()));
        }
        Ok(LogisticTruth { w_x: m.w_x })
    };
    Ok(match choice {
        PropensityChoice::Logistic => {
            let cfg = LogisticConfig { l2: d.l2, clip: d.clip, ..LogisticConfig::default() };
            Box::new(fit_logistic(ds, &cfg)?.model)
        }
        PropensityChoice::Oracle => Box::new(oracle()?),
        PropensityChoice::Scaled(c0, c1) => Box::new(override_propensity(oracle()?, PropensityOverride::scaled(c0, c1))?),
    })
}

fn write_rows(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_estimate(a: &EstimateArgs) -> Result<()> {
    let (ds, queries) = prepare(&a.data)?;
    let prop = build_propensity(&a.data, &ds)?;
    let pool = ds.split_view(Split::Train)?;
    let base = CounterfactualEstimator::new(&pool, KernelSpec::new(a.kernel.parse()?, a.bandwidth)?, prop.as_ref())?;
    let est = if a.select {
        let mut grid = Vec::new();
        for fam in [KernelFamily::Gaussian, KernelFamily::Epanechnikov] {
            for &h in &a.bandwidths {
                grid.push(KernelSpec::new(fam, h)?);
            }
        }
        let val = ds.split_view(Split::Val)?;
        let sel = select_bandwidth(&base, &val, &grid, 500)?;
        log::info!("selected {}", sel.kernel);
        base.with_kernel(sel.kernel)
    } else {
        base
    };
    let rows = est
        .estimate_all(&queries)
        .into_iter()
        .map(|r| match r {
            Ok(e) => vec![
                e.y_hat.to_string(),
                e.bounded.to_string(),
                e.coverage_ok.to_string(),
                e.n_effective_target_arm.to_string(),
                est.kernel().family().to_string(),
                est.kernel().bandwidth().to_string(),
                "ok".into(),
            ],
            Err(e) => vec![String::new(), String::new(), "false".into(), String::new(), String::new(), String::new(), e.to_string()],
        })
        .collect();
    write_rows(&a.data.out, &["y_hat", "bounded", "coverage_ok", "n_effective", "kernel", "bandwidth", "status"], rows)
}

fn cmd_baseline(a: &BaselineArgs) -> Result<()> {
    let (ds, queries) = prepare(&a.data)?;
    let pool = ds.split_view(Split::Train)?;
    let grid = TauGrid::with_step(a.tau_step)?;
    let cfg = QuantileConfig { iterations: a.iterations, ..QuantileConfig::default() };
    let estimate: Box<dyn Fn(&Evidence) -> Result<f64>> = match a.method.as_str() {
        "bilevel" => {
            let m = BilevelQuantile::fit(&pool, &grid, &cfg)?;
            Box::new(move |ev| m.estimate(ev))
        }
        "fourstep" => {
            let prop = build_propensity(&a.data, &ds)?;
            let m = FourStepQuantile::fit(&pool, &grid, prop.as_ref(), &cfg)?;
            Box::new(move |ev| m.estimate(ev))
        }
        other => return Err(Error::Config(format!("unknown baseline '{other}'"))),
    };
    let rows = queries
        .iter()
        .map(|ev| match ev.check_against(&pool).and_then(|_| estimate(ev)) {
            Ok(v) => vec![v.to_string(), "ok".into()],
            Err(e) => vec![String::new(), e.to_string()],
        })
        .collect();
    write_rows(&a.data.out, &["y_hat", "status"], rows)
}

fn cmd_rank_check(a: &RankCheckArgs) -> Result<()> {
    let mut rdr = csv::Reader::from_path(&a.input)?;
    let headers = rdr.headers()?.clone();
    let ix = column_index(&headers, &a.x)?;
    let iy = column_index(&headers, &a.y)?;
    let ib = a.by.as_deref().map(|c| column_index(&headers, c)).transpose()?;
    let (mut xs, mut ys, mut cond) = (Vec::new(), Vec::new(), Vec::new());
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        xs.push(parse_cell(&rec, ix, r + 1, &a.x)?);
        ys.push(parse_cell(&rec, iy, r + 1, &a.y)?);
        if let (Some(i), Some(name)) = (ib, &a.by) {
            cond.push(parse_cell(&rec, i, r + 1, name)?);
        }
    }
    let pooled = kendall_fast(&xs, &ys)?;
    let mut report = json!({ "n": xs.len(), "pooled": pooled });
    if ib.is_some() {
        report["binned"] = serde_json::to_value(binned_kendall(&cond, &xs, &ys, a.bins)?)?;
    }
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

fn load_plan(path: &Path, seed: Option<u64>) -> Result<ExperimentPlan> {
    let mut plan = ExperimentPlan::load(path)?;
    if let Some(s) = seed {
        plan.seeds = vec![s];
    }
    if let DataSource::Csv { path, .. } = &plan.source {
        if !path.is_file() {
            let msg = format!("data file {} not found", path.display());
            return Err(std::io::Error::new(std::io::ErrorKind::NotFound, msg).into());
        }
    }
    Ok(plan)
}

/// Partial tables are fine; a run where nothing succeeded is an error.
fn any_success(rows: &[CellResult]) -> Result<()> {
    match rows.iter().find(|r| r.is_failed()) {
        Some(first) if rows.iter().all(|r| r.is_failed()) => Err(Error::Degenerate(format!("every cell failed, first: {}", first.status))),
        _ => Ok(()),
    }
}

fn cmd_run(a: &RunArgs) -> Result<()> {
    let plan = load_plan(&a.plan, a.seed)?;
    let out = run_experiment(&plan)?;
    write_outputs(&out, &a.out)?;
    any_success(&out.rows)
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let plan = load_plan(&a.plan, a.seed)?;
    let axis: SweepAxis = a.axis.parse()?;
    let points = sweep(axis, &a.values, &plan)?;
    std::fs::create_dir_all(&a.out)?;
    write_sweep_csv(axis, &points, File::create(a.out.join("sweep.csv"))?)?;
    write_sweep_summary_csv(axis, &points, File::create(a.out.join("sweep_summary.csv"))?)?;
    let manifests: Vec<_> = points.iter().map(|p| json!({ "value": p.value, "manifest": p.output.manifest })).collect();
    std::fs::write(a.out.join("manifest.json"), serde_json::to_string_pretty(&manifests)? + "\n")?;
    let rows: Vec<CellResult> = points.iter().flat_map(|p| p.output.rows.iter().cloned()).collect();
    any_success(&rows)
}
