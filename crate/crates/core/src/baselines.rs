//! Quantile-regression baselines.
//!
//! Both methods find the quantile level `tau*` at which a fitted
//! conditional quantile curve passes closest to the evidence `y`, then read
//! the counterfactual off the curve at `tau*`:
//!
//! * bilevel: one linear model `q(x, z; tau)` with the treatment as a feature;
//! * four-step: separate inverse-propensity-weighted linear models
//!   `q_x(z; tau)` per arm.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Arm, Evidence, ObservationalDataset, TreatmentMode};
use crate::error::{Error, Result};
use crate::propensity::Propensity;

/// Pinball loss `tau xi` for `xi >= 0`, `(tau - 1) xi` otherwise.
pub fn check_loss(xi: f64, tau: f64) -> f64 {
    if xi >= 0.0 { tau * xi } else { (tau - 1.0) * xi }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub tau: f64,
}

impl QuantileModel {
    pub fn predict(&self, features: &[f64]) -> f64 {
        self.intercept + self.weights.iter().zip(features).map(|(w, v)| w * v).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauGrid {
    levels: Vec<f64>,
}

impl Default for TauGrid {
    fn default() -> Self {
        TauGrid::with_step(0.05).expect("valid step")
    }
}

impl TauGrid {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Config("tau grid is empty".into()));
        }
        if levels.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::Config("tau levels must lie in (0, 1)".into()));
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("tau levels must be strictly increasing".into()));
        }
        Ok(TauGrid { levels })
    }

    /// `step, 2 step, ...` up to `1 - step`.
    pub fn with_step(step: f64) -> Result<Self> {
        if !(step > 0.0 && step < 0.5) {
            return Err(Error::Config(format!("tau step must lie in (0, 0.5), got {step}")));
        }
        let count = (1.0 / step).round() as usize;
        let levels = (1..count).map(|i| i as f64 / count as f64).collect();
        TauGrid::new(levels)
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileConfig {
    pub iterations: usize,
    /// Step at iteration `k` is `step_scale / sqrt(k)`.
    pub step_scale: f64,
}

impl Default for QuantileConfig {
    fn default() -> Self {
        QuantileConfig { iterations: 20_000, step_scale: 1.0 }
    }
}

/// Weighted linear quantile regression.
///
/// Subgradient descent on the weighted mean check loss in standardized
/// coordinates, averaging the iterates of the second half. Rows with zero
/// weight are skipped.
pub fn fit_quantile(
    features: &Array2<f64>,
    targets: &[f64],
    sample_weights: &[f64],
    tau: f64,
    cfg: &QuantileConfig,
) -> Result<QuantileModel> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("tau must lie in (0, 1), got {tau}")));
    }
    let (n, m) = features.dim();
    if targets.len() != n || sample_weights.len() != n {
        return Err(Error::Alignment("features, targets and weights differ in length".into()));
    }
    if sample_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Validation("sample weights must be finite and non-negative".into()));
    }
    if cfg.iterations < 2 || !(cfg.step_scale > 0.0) {
        return Err(Error::Config("quantile fit needs at least 2 iterations and a positive step".into()));
    }
    let rows: Vec<usize> = (0..n).filter(|&i| sample_weights[i] > 0.0).collect();
    if rows.is_empty() {
        return Err(Error::Validation("all sample weights are zero".into()));
    }
    let total: f64 = rows.iter().map(|&i| sample_weights[i]).sum();
    let w: Vec<f64> = rows.iter().map(|&i| sample_weights[i] / total).collect();

    let mut mean = vec![0.0; m];
    let mut scale = vec![0.0; m];
    for (k, &i) in rows.iter().enumerate() {
        for j in 0..m {
            mean[j] += w[k] * features[[i, j]];
        }
    }
    for (k, &i) in rows.iter().enumerate() {
        for j in 0..m {
            let d = features[[i, j]] - mean[j];
            scale[j] += w[k] * d * d;
        }
    }
    for s in scale.iter_mut() {
        *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
    }
    let y_mean: f64 = rows.iter().zip(&w).map(|(&i, wk)| wk * targets[i]).sum();
    let y_var: f64 = rows.iter().zip(&w).map(|(&i, wk)| wk * (targets[i] - y_mean).powi(2)).sum();
    let y_scale = if y_var > 1e-24 { y_var.sqrt() } else { 1.0 };

    // Standardized design, row-major with a trailing 1 for the intercept.
    let p = m + 1;
    let mut design = Vec::with_capacity(rows.len() * p);
    let mut y = Vec::with_capacity(rows.len());
    for &i in &rows {
        for j in 0..m {
            design.push((features[[i, j]] - mean[j]) / scale[j]);
        }
        design.push(1.0);
        y.push((targets[i] - y_mean) / y_scale);
    }

    let mut theta = vec![0.0; p];
    let mut avg = vec![0.0; p];
    let mut grad = vec![0.0; p];
    let half = cfg.iterations / 2;
    for it in 1..=cfg.iterations {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (k, row) in design.chunks_exact(p).enumerate() {
            let fit: f64 = row.iter().zip(&theta).map(|(a, b)| a * b).sum();
            let r = y[k] - fit;
            let psi = if r > 0.0 {
                tau
            } else if r < 0.0 {
                tau - 1.0
            } else {
                continue;
            };
            let c = w[k] * psi;
            for (g, a) in grad.iter_mut().zip(row) {
                *g -= c * a;
            }
        }
        let step = cfg.step_scale / (it as f64).sqrt();
        for (t, g) in theta.iter_mut().zip(&grad) {
            *t -= step * g;
        }
        if it > half {
            for (a, t) in avg.iter_mut().zip(&theta) {
                *a += t;
            }
        }
    }
    let count = (cfg.iterations - half) as f64;
    avg.iter_mut().for_each(|a| *a /= count);

    let weights: Vec<f64> = (0..m).map(|j| y_scale * avg[j] / scale[j]).collect();
    let intercept = y_mean + y_scale * avg[m] - weights.iter().zip(&mean).map(|(a, b)| a * b).sum::<f64>();
    if !intercept.is_finite() || weights.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("quantile fit diverged".into()));
    }
    Ok(QuantileModel { weights, intercept, tau })
}

/// Index of the value closest to `y`; ties go to the lower index.
pub fn select_tau(values: &[f64], y: f64) -> usize {
    let mut best = 0;
    for (j, v) in values.iter().enumerate().skip(1) {
        if (v - y).abs() < (values[best] - y).abs() {
            best = j;
        }
    }
    best
}

fn require_binary(ds: &ObservationalDataset) -> Result<()> {
    if ds.mode() != TreatmentMode::Binary {
        return Err(Error::Precondition("quantile baselines need binary treatments".into()));
    }
    Ok(())
}

fn fit_grid(features: &Array2<f64>, targets: &[f64], weights: &[f64], grid: &TauGrid, cfg: &QuantileConfig) -> Result<Vec<QuantileModel>> {
    grid.levels().par_iter().map(|&tau| fit_quantile(features, targets, weights, tau, cfg)).collect()
}

/// One linear quantile model per level over `(x, z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BilevelQuantile {
    pub grid: TauGrid,
    pub models: Vec<QuantileModel>,
}

impl BilevelQuantile {
    pub fn fit(pool: &ObservationalDataset, grid: &TauGrid, cfg: &QuantileConfig) -> Result<Self> {
        require_binary(pool)?;
        let (n, m) = (pool.len(), pool.dim());
        let features = Array2::from_shape_fn((n, m + 1), |(i, j)| if j == 0 { pool.treatment(i) } else { pool.z(i)[j - 1] });
        let models = fit_grid(&features, pool.outcomes(), &vec![1.0; n], grid, cfg)?;
        Ok(BilevelQuantile { grid: grid.clone(), models })
    }

    pub fn estimate(&self, ev: &Evidence) -> Result<f64> {
        ev.arms()?;
        let mut feat = Vec::with_capacity(ev.z.len() + 1);
        feat.push(ev.x);
        feat.extend_from_slice(&ev.z);
        let fitted: Vec<f64> = self.models.iter().map(|q| q.predict(&feat)).collect();
        let j = select_tau(&fitted, ev.y);
        feat[0] = ev.x_prime;
        Ok(self.models[j].predict(&feat))
    }
}

/// Per-arm inverse-propensity-weighted linear quantile models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourStepQuantile {
    pub grid: TauGrid,
    /// `models[arm][level]`.
    pub models: [Vec<QuantileModel>; 2],
}

impl FourStepQuantile {
    pub fn fit(pool: &ObservationalDataset, grid: &TauGrid, prop: &dyn Propensity, cfg: &QuantileConfig) -> Result<Self> {
        require_binary(pool)?;
        let features = pool.covariates();
        let mut models: [Vec<QuantileModel>; 2] = [Vec::new(), Vec::new()];
        for arm in Arm::BOTH {
            let mut weights = vec![0.0; pool.len()];
            for (k, w) in weights.iter_mut().enumerate() {
                if pool.arm(k) == Some(arm) {
                    let p = prop.prob(pool.z(k), arm);
                    if !(p > 0.0 && p.is_finite()) {
                        return Err(Error::Validation(format!("propensity {p} at row {k} is not positive")));
                    }
                    *w = 1.0 / p;
                }
            }
            if weights.iter().all(|w| *w == 0.0) {
                return Err(Error::Precondition(format!("no rows in arm {}", arm.code())));
            }
            models[arm.index()] = fit_grid(features, pool.outcomes(), &weights, grid, cfg)?;
        }
        Ok(FourStepQuantile { grid: grid.clone(), models })
    }

    pub fn estimate(&self, ev: &Evidence) -> Result<f64> {
        let (fact, target) = ev.arms()?;
        let fitted: Vec<f64> = self.models[fact.index()].iter().map(|q| q.predict(&ev.z)).collect();
        let j = select_tau(&fitted, ev.y);
        Ok(self.models[target.index()][j].predict(&ev.z))
    }
}

pub fn bilevel_estimate(pool: &ObservationalDataset, ev: &Evidence, grid: &TauGrid, cfg: &QuantileConfig) -> Result<f64> {
    ev.check_against(pool)?;
    BilevelQuantile::fit(pool, grid, cfg)?.estimate(ev)
}

pub fn fourstep_estimate(
    pool: &ObservationalDataset,
    ev: &Evidence,
    grid: &TauGrid,
    prop: &dyn Propensity,
    cfg: &QuantileConfig,
) -> Result<f64> {
    ev.check_against(pool)?;
    FourStepQuantile::fit(pool, grid, prop, cfg)?.estimate(ev)
}
