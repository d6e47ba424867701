//! Synthetic observational data with known potential outcomes.
//!
//! ```text
//! Z ~ N(0, S)          S = I, or S_ij = max(0.01, rho^|i-j|)
//! X ~ Bern(sigmoid(W_x . Z))
//! U0 ~ N(0, 1),  U1 = alpha U0
//! Y0 = W_y . Z / alpha + U0
//! Y1 = (W_y + W_y1) . Z + U1     W_y1 ~ N(0, beta I), absent when beta = 0
//! ```
//!
//! Draws come from ChaCha8 with one stream per variable block, so e.g. the
//! weight vectors do not depend on `n` and the first rows of a larger
//! sample coincide with a smaller one.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::{Arm, Evidence, ObservationalDataset, PotentialOutcomeTable, SplitRatios, TreatmentMode};
use crate::error::{Error, Result};
use crate::estimator::{GaussianLaw, PopulationQuery};
use crate::propensity::{sigmoid, Propensity};
use crate::rank::kendall_fast;

const STREAM_WX: u64 = 0;
const STREAM_WY: u64 = 1;
const STREAM_WY1: u64 = 2;
const STREAM_Z: u64 = 3;
const STREAM_X: u64 = 4;
const STREAM_U: u64 = 5;
const SPLIT_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub m: usize,
    pub n: usize,
    pub alpha: f64,
    pub rho: f64,
    pub beta: f64,
    pub seed: u64,
    pub split_ratios: SplitRatios,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { m: 10, n: 10_000, alpha: 2.0, rho: 0.0, beta: 0.0, seed: 0, split_ratios: SplitRatios::default() }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("m must be at least 1".into()));
        }
        if self.n < 10 {
            return Err(Error::Config(format!("n must be at least 10, got {}", self.n)));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config("alpha must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config("rho must lie in [0, 1)".into()));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Config("beta must be non-negative".into()));
        }
        self.split_ratios.validate()
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Oracle propensity `sigmoid(W_x . z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticTruth {
    pub w_x: Vec<f64>,
}

impl Propensity for LogisticTruth {
    fn prob(&self, z: &[f64], arm: Arm) -> f64 {
        let p1 = sigmoid(dot(&self.w_x, z));
        match arm {
            Arm::Treated => p1,
            Arm::Control => 1.0 - p1,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

/// Everything drawn for one dataset besides the sample itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimManifest {
    pub config: SimConfig,
    pub w_x: Vec<f64>,
    pub w_y: Vec<f64>,
    pub w_y1: Option<Vec<f64>>,
    pub treated_fraction: f64,
    pub covariance_regularized: bool,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub dataset: ObservationalDataset,
    pub truth: PotentialOutcomeTable,
    pub propensity: LogisticTruth,
    pub manifest: SimManifest,
}

impl Simulation {
    pub fn analytic_laws(&self) -> Result<AnalyticLaws> {
        analytic_laws(&self.manifest)
    }
}

/// Covariance factor `L` with `L L^T = S`. Returns whether a ridge was
/// needed.
fn covariance_factor(m: usize, rho: f64) -> Result<(Option<DMatrix<f64>>, bool)> {
    if rho == 0.0 {
        return Ok((None, false));
    }
    let s = DMatrix::from_fn(m, m, |i, j| rho.powi(i.abs_diff(j) as i32).max(0.01));
    if let Some(ch) = s.clone().cholesky() {
        return Ok((Some(ch.l()), false));
    }
    log::warn!("covariance not positive definite after flooring; adding 1e-6 I");
    let ridged = s + DMatrix::identity(m, m) * 1e-6;
    match ridged.cholesky() {
        Some(ch) => Ok((Some(ch.l()), true)),
        None => Err(Error::Covariance("covariance not positive definite even with ridge".into())),
    }
}

/// Raw draws shared by [`simulate`] and the rank-violation calibration.
struct Draws {
    z: Vec<f64>,
    u0: Vec<f64>,
    w_y: Vec<f64>,
    /// Standard-normal direction; `W_y1 = sqrt(beta) * g`.
    g: Vec<f64>,
    regularized: bool,
}

fn draw_common(cfg: &SimConfig) -> Result<Draws> {
    let (m, n) = (cfg.m, cfg.n);
    let mut rng = stream(cfg.seed, STREAM_WY);
    let w_y: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut rng = stream(cfg.seed, STREAM_WY1);
    let g: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();

    let (factor, regularized) = covariance_factor(m, cfg.rho)?;
    let mut rng = stream(cfg.seed, STREAM_Z);
    let mut z: Vec<f64> = (0..n * m).map(|_| StandardNormal.sample(&mut rng)).collect();
    if let Some(l) = factor {
        for row in z.chunks_mut(m) {
            let v = &l * DVector::from_column_slice(row);
            row.copy_from_slice(v.as_slice());
        }
    }
    let mut rng = stream(cfg.seed, STREAM_U);
    let u0: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Ok(Draws { z, u0, w_y, g, regularized })
}

fn outcomes(cfg: &SimConfig, d: &Draws, beta: f64) -> (Vec<f64>, Vec<f64>) {
    let m = cfg.m;
    let w1: Vec<f64> = d.w_y.iter().zip(&d.g).map(|(w, g)| w + beta.sqrt() * g).collect();
    let mut y0 = Vec::with_capacity(cfg.n);
    let mut y1 = Vec::with_capacity(cfg.n);
    for (row, u) in d.z.chunks(m).zip(&d.u0) {
        y0.push(dot(&d.w_y, row) / cfg.alpha + u);
        y1.push(dot(&w1, row) + cfg.alpha * u);
    }
    (y0, y1)
}

pub fn simulate(cfg: &SimConfig) -> Result<Simulation> {
    cfg.validate()?;
    let (m, n) = (cfg.m, cfg.n);
    let d = draw_common(cfg)?;
    let mut rng = stream(cfg.seed, STREAM_WX);
    let w_x: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut rng = stream(cfg.seed, STREAM_X);
    let x: Vec<f64> = d
        .z
        .chunks(m)
        .map(|row| if rng.random::<f64>() < sigmoid(dot(&w_x, row)) { 1.0 } else { 0.0 })
        .collect();
    let (y0, y1) = outcomes(cfg, &d, cfg.beta);
    let y: Vec<f64> = (0..n).map(|i| if x[i] == 1.0 { y1[i] } else { y0[i] }).collect();
    let split = cfg.split_ratios.assign(n, cfg.seed ^ SPLIT_SALT)?;
    let treated_fraction = x.iter().sum::<f64>() / n as f64;
    let cov = Array2::from_shape_vec((n, m), d.z).expect("shape");
    let dataset = ObservationalDataset::new(TreatmentMode::Binary, x, cov, y, split)?;
    let truth = PotentialOutcomeTable::new(y0, y1)?;
    let w_y1 = (cfg.beta > 0.0).then(|| d.g.iter().map(|g| cfg.beta.sqrt() * g).collect());
    Ok(Simulation {
        dataset,
        truth,
        propensity: LogisticTruth { w_x: w_x.clone() },
        manifest: SimManifest {
            config: cfg.clone(),
            w_x,
            w_y: d.w_y,
            w_y1,
            treated_fraction,
            covariance_regularized: d.regularized,
        },
    })
}

/// Pooled Kendall tau between `Y0` and `Y1` for `cfg` with its `beta`
/// replaced.
pub fn pooled_tau(cfg: &SimConfig, beta: f64) -> Result<f64> {
    let d = draw_common(cfg)?;
    let (y0, y1) = outcomes(cfg, &d, beta);
    Ok(kendall_fast(&y0, &y1)?.rho)
}

/// Bisection for the `beta` whose pooled tau equals `target` on a
/// calibration sample of size `n_cal` drawn with `cfg.seed`. The weight
/// draws match [`simulate`] with the same seed, so the result applies to
/// that dataset.
pub fn calibrate_beta(cfg: &SimConfig, target: f64, n_cal: usize) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::Config(format!("target tau must lie in (0, 1), got {target}")));
    }
    let mut cal = cfg.clone();
    cal.n = n_cal;
    cal.validate()?;
    let d = draw_common(&cal)?;
    let tau = |beta: f64| -> Result<f64> {
        let (y0, y1) = outcomes(&cal, &d, beta);
        Ok(kendall_fast(&y0, &y1)?.rho)
    };
    if tau(0.0)? <= target {
        return Ok(0.0);
    }
    let mut hi = 1.0;
    while tau(hi)? > target {
        hi *= 2.0;
        if hi > 1e8 {
            return Err(Error::Degenerate("pooled tau does not fall to the target".into()));
        }
    }
    let mut lo = 0.0;
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if tau(mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Linear-Gaussian conditional laws `Y_a | Z = z ~ N(coef_a . z, sd_a^2)`
/// with comonotone noise across arms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticLaws {
    pub coef: [Vec<f64>; 2],
    pub sd: [f64; 2],
}

impl AnalyticLaws {
    pub fn law(&self, arm: Arm, z: &[f64]) -> GaussianLaw {
        GaussianLaw { mean: dot(&self.coef[arm.index()], z), sd: self.sd[arm.index()] }
    }

    pub fn population_query(&self, ev: &Evidence) -> Result<PopulationQuery> {
        let (fact, target) = ev.arms()?;
        if ev.z.len() != self.coef[0].len() {
            return Err(Error::Alignment("evidence dimension does not match the model".into()));
        }
        Ok(PopulationQuery { factual: self.law(fact, &ev.z), target: self.law(target, &ev.z), y: ev.y })
    }

    /// Rank-matched counterfactual `mu' + sd' (y - mu) / sd`.
    pub fn counterfactual(&self, ev: &Evidence) -> Result<f64> {
        let q = self.population_query(ev)?;
        Ok(q.target.mean + q.target.sd * (ev.y - q.factual.mean) / q.factual.sd)
    }
}

pub fn analytic_laws(manifest: &SimManifest) -> Result<AnalyticLaws> {
    let cfg = &manifest.config;
    if cfg.beta != 0.0 {
        return Err(Error::Unsupported("no closed-form counterfactual map when beta > 0".into()));
    }
    Ok(AnalyticLaws {
        coef: [manifest.w_y.iter().map(|w| w / cfg.alpha).collect(), manifest.w_y.clone()],
        sd: [1.0, cfg.alpha],
    })
}

/// Draws `n` independent standard-normal covariate rows with `seed`; handy
/// for Monte Carlo checks against the oracle propensity.
pub fn normal_rows(n: usize, m: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nd = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n).map(|_| (0..m).map(|_| nd.sample(&mut rng)).collect()).collect()
}
