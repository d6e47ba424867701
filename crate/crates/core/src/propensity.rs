//! Propensity scores `p_x(z) = P(X = x | Z = z)` for binary treatments.
//!
//! [`fit_logistic`] estimates an L2-penalized logistic model by full-batch
//! gradient ascent. [`ScaledPropensity`] multiplies a reference propensity
//! by per-arm constants, which realizes a known relative error
//! `delta = (p - p_hat) / p_hat = (1 - c) / c` at every covariate value.

use serde::{Deserialize, Serialize};

use crate::dataset::{Arm, ObservationalDataset, Split};
use crate::error::{Error, Result};

/// Anything that returns `P(X = arm | Z = z)`.
pub trait Propensity: Sync {
    fn prob(&self, z: &[f64], arm: Arm) -> f64;
}

impl<P: Propensity + ?Sized> Propensity for &P {
    fn prob(&self, z: &[f64], arm: Arm) -> f64 {
        (**self).prob(z, arm)
    }
}

impl<P: Propensity + ?Sized> Propensity for Box<P> {
    fn prob(&self, z: &[f64], arm: Arm) -> f64 {
        (**self).prob(z, arm)
    }
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^t)` without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

pub const DEFAULT_CLIP: f64 = 0.01;

/// Logistic propensity `sigma(w . z + b)` for the treated arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub l2: f64,
    /// Predictions are clipped to `[clip, 1 - clip]`.
    pub clip: f64,
}

impl PropensityModel {
    pub fn new(weights: Vec<f64>, intercept: f64, clip: f64) -> Result<Self> {
        if !(clip > 0.0 && clip < 0.5) {
            return Err(Error::Config(format!("clip must lie in (0, 0.5), got {clip}")));
        }
        if weights.iter().any(|w| !w.is_finite()) || !intercept.is_finite() {
            return Err(Error::Validation("non-finite propensity parameters".into()));
        }
        Ok(PropensityModel { weights, intercept, l2: 0.0, clip })
    }

    pub fn linear_predictor(&self, z: &[f64]) -> f64 {
        self.weights.iter().zip(z).map(|(w, v)| w * v).sum::<f64>() + self.intercept
    }

    /// Unclipped `P(X = arm | z)`.
    pub fn raw(&self, z: &[f64], arm: Arm) -> f64 {
        let p1 = sigmoid(self.linear_predictor(z));
        match arm {
            Arm::Treated => p1,
            Arm::Control => 1.0 - p1,
        }
    }

    pub fn predict(&self, z: &[f64], arm: Arm) -> f64 {
        self.raw(z, arm).clamp(self.clip, 1.0 - self.clip)
    }
}

impl Propensity for PropensityModel {
    fn prob(&self, z: &[f64], arm: Arm) -> f64 {
        self.predict(z, arm)
    }
}

/// Same treated-arm probability everywhere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantPropensity(pub f64);

impl Propensity for ConstantPropensity {
    fn prob(&self, _z: &[f64], arm: Arm) -> f64 {
        match arm {
            Arm::Treated => self.0,
            Arm::Control => 1.0 - self.0,
        }
    }
}

/// Wraps a closure `(z, arm) -> probability`.
pub struct FnPropensity<F>(pub F);

impl<F> Propensity for FnPropensity<F>
where
    F: Fn(&[f64], Arm) -> f64 + Sync,
{
    fn prob(&self, z: &[f64], arm: Arm) -> f64 {
        (self.0)(z, arm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticConfig {
    pub l2: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub clip: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig { l2: 1e-4, max_iter: 5000, tol: 1e-8, clip: DEFAULT_CLIP }
    }
}

/// Weight norm past which the fit is treated as separated.
pub const SEPARATION_NORM_CAP: f64 = 1e3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub model: PropensityModel,
    pub iterations: usize,
    pub converged: bool,
    pub separated: bool,
    /// Penalized mean log-likelihood at the returned parameters.
    pub objective: f64,
}

struct LogisticProblem<'a> {
    rows: Vec<(&'a [f64], f64)>,
    l2: f64,
}

impl LogisticProblem<'_> {
    /// True when every row falls strictly on the side of its own arm.
    fn separates(&self, theta: &[f64]) -> bool {
        let m = theta.len() - 1;
        self.rows.iter().all(|(z, x)| {
            let eta = z.iter().zip(&theta[..m]).map(|(a, b)| a * b).sum::<f64>() + theta[m];
            if *x == 1.0 { eta > 0.0 } else { eta < 0.0 }
        })
    }

    /// Penalized mean log-likelihood; `theta = [w..., b]`.
    fn objective(&self, theta: &[f64]) -> f64 {
        let m = theta.len() - 1;
        let mut ll = 0.0;
        for (z, x) in &self.rows {
            let eta = z.iter().zip(&theta[..m]).map(|(a, b)| a * b).sum::<f64>() + theta[m];
            ll += x * eta - softplus(eta);
        }
        let pen: f64 = theta[..m].iter().map(|w| w * w).sum();
        ll / self.rows.len() as f64 - 0.5 * self.l2 * pen
    }

    fn gradient(&self, theta: &[f64], grad: &mut [f64]) {
        let m = theta.len() - 1;
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (z, x) in &self.rows {
            let eta = z.iter().zip(&theta[..m]).map(|(a, b)| a * b).sum::<f64>() + theta[m];
            let r = x - sigmoid(eta);
            for (g, v) in grad[..m].iter_mut().zip(z.iter()) {
                *g += r * v;
            }
            grad[m] += r;
        }
        let n = self.rows.len() as f64;
        for j in 0..m {
            grad[j] = grad[j] / n - self.l2 * theta[j];
        }
        grad[m] /= n;
    }
}

/// Fits the treated-arm logistic propensity on the train split.
///
/// Gradient ascent on the penalized mean log-likelihood with Armijo
/// backtracking. Stops when the gradient max-norm drops below `tol`, after
/// `max_iter` iterations, or when the weight norm exceeds
/// [`SEPARATION_NORM_CAP`] (flagged as separation).
pub fn fit_logistic(ds: &ObservationalDataset, cfg: &LogisticConfig) -> Result<LogisticFit> {
    if !(cfg.l2 >= 0.0 && cfg.l2.is_finite()) {
        return Err(Error::Config("l2 must be non-negative".into()));
    }
    if !(cfg.clip > 0.0 && cfg.clip < 0.5) {
        return Err(Error::Config(format!("clip must lie in (0, 0.5), got {}", cfg.clip)));
    }
    let mut rows = Vec::new();
    for i in 0..ds.len() {
        if ds.split(i) != Split::Train {
            continue;
        }
        let arm = ds
            .arm(i)
            .ok_or_else(|| Error::Precondition("logistic propensity needs binary treatments".into()))?;
        rows.push((ds.z(i), arm.code()));
    }
    let n1 = rows.iter().filter(|r| r.1 == 1.0).count();
    if n1 == 0 || n1 == rows.len() {
        return Err(Error::Precondition("both arms must be present in the train split".into()));
    }
    let problem = LogisticProblem { rows, l2: cfg.l2 };
    let m = ds.dim();
    let mut theta = vec![0.0; m + 1];
    let mut grad = vec![0.0; m + 1];
    let mut trial = vec![0.0; m + 1];
    let mut f = problem.objective(&theta);
    let mut step: f64 = 1.0;
    let mut iterations = 0;
    let mut converged = false;
    let mut separated = false;

    while iterations < cfg.max_iter {
        problem.gradient(&theta, &mut grad);
        let gmax = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        if gmax < cfg.tol {
            converged = true;
            break;
        }
        let g2: f64 = grad.iter().map(|g| g * g).sum();
        step = (step * 2.0).min(1e6);
        let f_new = loop {
            for ((t, th), g) in trial.iter_mut().zip(&theta).zip(&grad) {
                *t = th + step * g;
            }
            let f_try = problem.objective(&trial);
            if f_try >= f + 1e-4 * step * g2 {
                break Some(f_try);
            }
            step *= 0.5;
            if step < 1e-20 {
                break None;
            }
        };
        iterations += 1;
        let Some(f_new) = f_new else {
            // No ascent step exists at floating-point resolution.
            converged = gmax < cfg.tol.sqrt();
            break;
        };
        debug_assert!(f_new >= f, "log-likelihood decreased: {f} -> {f_new}");
        theta.copy_from_slice(&trial);
        f = f_new;
        let norm = theta[..m].iter().map(|w| w * w).sum::<f64>().sqrt();
        if norm > SEPARATION_NORM_CAP {
            separated = true;
            log::warn!("logistic propensity: weight norm {norm:.1} exceeds cap, data look separated");
            break;
        }
    }
    if !separated && problem.separates(&theta) {
        separated = true;
        log::warn!("logistic propensity: the fitted hyperplane separates the arms");
    }
    if !converged && !separated {
        log::warn!("logistic propensity: stopped after {iterations} iterations without reaching tol");
    }
    let mut model = PropensityModel::new(theta[..m].to_vec(), theta[m], cfg.clip)?;
    model.l2 = cfg.l2;
    Ok(LogisticFit { model, iterations, converged, separated, objective: f })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverrideMode {
    Oracle,
    Scaled,
}

/// Replaces estimated propensities by the truth, optionally scaled per arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropensityOverride {
    pub mode: OverrideMode,
    /// `(c0, c1)` multiplying the control and treated probabilities.
    pub scale_factors: (f64, f64),
}

impl PropensityOverride {
    pub fn oracle() -> Self {
        PropensityOverride { mode: OverrideMode::Oracle, scale_factors: (1.0, 1.0) }
    }

    pub fn scaled(c0: f64, c1: f64) -> Self {
        PropensityOverride { mode: OverrideMode::Scaled, scale_factors: (c0, c1) }
    }

    /// Relative error `(1 - c) / c` realized on `arm` where no clipping occurs.
    pub fn delta(&self, arm: Arm) -> f64 {
        let c = self.factor(arm);
        (1.0 - c) / c
    }

    pub fn factor(&self, arm: Arm) -> f64 {
        match self.mode {
            OverrideMode::Oracle => 1.0,
            OverrideMode::Scaled => match arm {
                Arm::Control => self.scale_factors.0,
                Arm::Treated => self.scale_factors.1,
            },
        }
    }
}

/// Lower bound applied to scaled probabilities.
pub const SCALED_FLOOR: f64 = 1e-6;

/// `clamp(c_arm * p_arm(z), floor, 1)`.
#[derive(Debug, Clone)]
pub struct ScaledPropensity<P> {
    inner: P,
    factors: [f64; 2],
}

impl<P: Propensity> ScaledPropensity<P> {
    /// Fraction of probe covariate vectors where some arm's scaled
    /// probability leaves `(0, 1]` before clipping.
    pub fn clipped_fraction<'a>(&self, probes: impl IntoIterator<Item = &'a [f64]>) -> f64 {
        let (mut total, mut bad) = (0usize, 0usize);
        for z in probes {
            total += 1;
            let out = Arm::BOTH.iter().any(|&a| {
                let v = self.factors[a.index()] * self.inner.prob(z, a);
                !(v > 0.0 && v <= 1.0)
            });
            if out {
                bad += 1;
            }
        }
        if total == 0 { 0.0 } else { bad as f64 / total as f64 }
    }

    /// Logs a configuration warning when more than 5% of the dataset's
    /// rows need clipping. Returns the clipped fraction.
    pub fn check_probes(&self, ds: &ObservationalDataset) -> f64 {
        let frac = self.clipped_fraction((0..ds.len()).map(|i| ds.z(i)));
        if frac > 0.05 {
            log::warn!(
                "scaled propensity leaves (0,1] at {:.1}% of probe points; realized errors are not constant",
                100.0 * frac
            );
        }
        frac
    }
}

impl<P: Propensity> Propensity for ScaledPropensity<P> {
    fn prob(&self, z: &[f64], arm: Arm) -> f64 {
        (self.factors[arm.index()] * self.inner.prob(z, arm)).clamp(SCALED_FLOOR, 1.0)
    }
}

pub fn override_propensity<P: Propensity>(true_pi: P, ov: PropensityOverride) -> Result<ScaledPropensity<P>> {
    let factors = [ov.factor(Arm::Control), ov.factor(Arm::Treated)];
    if factors.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
        return Err(Error::Config("propensity scale factors must be positive".into()));
    }
    Ok(ScaledPropensity { inner: true_pi, factors })
}
