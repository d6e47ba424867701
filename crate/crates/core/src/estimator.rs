//! Counterfactual outcome estimation by minimizing a kernel-smoothed,
//! inverse-propensity-weighted loss.
//!
//! For evidence `(x, z, y)` and target treatment `x'` the estimated loss is
//!
//! ```text
//! R(t) = sum_k a_k |y_k - t| + b t
//! a_k  = K_h(z_k - z) 1(x_k = x') / p_{x'}(z_k) / S
//! b    = sum_k K_h(z_k - z) 1(x_k = x) / p_x(z_k) sign(y_k - y) / S
//! S    = sum_k K_h(z_k - z)            (over all rows)
//! ```
//!
//! `R` is convex and piecewise linear in `t`; its minimizer is a weighted
//! quantile of the target-arm outcomes and is computed exactly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::dataset::{Arm, Evidence, ObservationalDataset, TreatmentMode};
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::propensity::Propensity;
use crate::rank::sign3;

/// Convex piecewise-linear loss `f(t) = sum_k a_k |y_k - t| + b t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossProfile {
    knots: Vec<f64>,
    a: Vec<f64>,
    b: f64,
    total_a: f64,
    normalizer: f64,
}

impl LossProfile {
    /// Builds a profile from unsorted knots. Zero-weight knots are dropped.
    pub fn new(knots: Vec<f64>, a: Vec<f64>, b: f64) -> Result<Self> {
        Self::with_normalizer(knots, a, b, 1.0)
    }

    fn with_normalizer(knots: Vec<f64>, a: Vec<f64>, b: f64, normalizer: f64) -> Result<Self> {
        if knots.len() != a.len() {
            return Err(Error::Alignment("knots and weights differ in length".into()));
        }
        if knots.iter().any(|v| !v.is_finite()) || !b.is_finite() {
            return Err(Error::Validation("non-finite value in loss profile".into()));
        }
        if a.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Validation("loss weights must be finite and non-negative".into()));
        }
        let mut pairs: Vec<(f64, f64)> = knots.into_iter().zip(a).filter(|p| p.1 > 0.0).collect();
        if pairs.is_empty() {
            return Err(Error::Coverage("no target-arm outcome carries positive weight".into()));
        }
        pairs.sort_by(|p, q| p.0.total_cmp(&q.0));
        let (knots, a): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let total_a = a.iter().sum();
        Ok(LossProfile { knots, a, b, total_a, normalizer })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn weights(&self) -> &[f64] {
        &self.a
    }

    pub fn slope(&self) -> f64 {
        self.b
    }

    pub fn total_a(&self) -> f64 {
        self.total_a
    }

    /// Kernel mass `sum_k K_h(z_k - z)` shared by both terms.
    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    pub fn evaluate(&self, t: f64) -> f64 {
        self.knots.iter().zip(&self.a).map(|(y, a)| a * (y - t).abs()).sum::<f64>() + self.b * t
    }

    /// `sum a / max a`.
    pub fn effective_size(&self) -> f64 {
        let max = self.a.iter().cloned().fold(0.0, f64::max);
        self.total_a / max
    }

    /// Scales every weight and the slope by `c > 0`.
    pub fn scaled(&self, c: f64) -> LossProfile {
        LossProfile {
            knots: self.knots.clone(),
            a: self.a.iter().map(|v| v * c).collect(),
            b: self.b * c,
            total_a: self.total_a * c,
            normalizer: self.normalizer,
        }
    }

    /// Exact minimizer.
    ///
    /// Bounded case (`|b| < total_a`): the smallest knot whose cumulative
    /// weight reaches `(total_a - b) / 2`, i.e. the left end of the
    /// minimizing interval. Otherwise the loss decreases without bound on
    /// one side; the extreme knot on that side is returned and flagged.
    pub fn minimize(&self) -> CounterfactualEstimate {
        let first = self.knots[0];
        let last = *self.knots.last().expect("non-empty");
        let (y_hat, bounded) = if self.b >= self.total_a {
            (first, false)
        } else if self.b <= -self.total_a {
            (last, false)
        } else {
            let target = 0.5 * (self.total_a - self.b);
            let slack = 1e-12 * self.total_a;
            let mut acc = 0.0;
            let mut pick = last;
            for (y, a) in self.knots.iter().zip(&self.a) {
                acc += a;
                if acc >= target - slack {
                    pick = *y;
                    break;
                }
            }
            (pick, true)
        };
        CounterfactualEstimate {
            y_hat,
            loss_at_min: self.evaluate(y_hat),
            n_effective_target_arm: self.effective_size(),
            bounded,
            coverage_ok: true,
        }
    }

    /// Continuous ranked probability score of `y` under the law that puts
    /// mass `a_k / total_a` on knot `y_k`.
    pub fn crps(&self, y: f64) -> f64 {
        let total = self.total_a;
        let mut first = 0.0;
        let mut spread = 0.0;
        let mut below = 0.0;
        for (v, a) in self.knots.iter().zip(&self.a) {
            let w = a / total;
            first += w * (v - y).abs();
            // sum_{j<k} w_j w_k (v_k - v_j) = sum_k w_k v_k (W_<k + W_<=k - 1)
            spread += w * v * (2.0 * below + w - 1.0);
            below += w;
        }
        first - spread
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualEstimate {
    pub y_hat: f64,
    pub loss_at_min: f64,
    pub n_effective_target_arm: f64,
    /// False when `|b| >= total_a` and `y_hat` was clamped to an extreme knot.
    pub bounded: bool,
    pub coverage_ok: bool,
}

pub fn minimize_profile(profile: &LossProfile) -> CounterfactualEstimate {
    profile.minimize()
}

/// Kernel weights of all pool rows around `z`, rescaled by their maximum.
/// Returns the relative weights and `ln` of the scale.
fn relative_kernel_weights(pool: &ObservationalDataset, kernel: &KernelSpec, z: &[f64]) -> Result<(Vec<f64>, f64)> {
    let logs: Vec<f64> = (0..pool.len()).map(|k| kernel.ln_scaled_weight_between(pool.z(k), z)).collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Coverage(format!("{kernel} puts zero weight on every reference row")));
    }
    Ok((logs.into_iter().map(|l| (l - max).exp()).collect(), max))
}

/// Assembles `a_k` and `b` from per-row factors. `target[k]` multiplies the
/// absolute-deviation term, `factual[k]` the sign term; both already
/// include indicator and inverse-propensity parts.
fn assemble(
    pool: &ObservationalDataset,
    kernel: &KernelSpec,
    z: &[f64],
    y: f64,
    target: impl Fn(usize) -> f64,
    factual: impl Fn(usize) -> f64,
) -> Result<LossProfile> {
    let (rel, ln_scale) = relative_kernel_weights(pool, kernel, z)?;
    assemble_relative(pool, &rel, ln_scale, y, target, factual)
}

fn assemble_relative(
    pool: &ObservationalDataset,
    rel: &[f64],
    ln_scale: f64,
    y: f64,
    target: impl Fn(usize) -> f64,
    factual: impl Fn(usize) -> f64,
) -> Result<LossProfile> {
    let s: f64 = rel.iter().sum();
    let mut knots = Vec::new();
    let mut a = Vec::new();
    let mut b = 0.0;
    for (k, r) in rel.iter().enumerate() {
        if *r == 0.0 {
            continue;
        }
        let ft = target(k);
        if ft != 0.0 {
            knots.push(pool.outcome(k));
            a.push(r * ft / s);
        }
        let ff = factual(k);
        if ff != 0.0 {
            b += r * ff * f64::from(sign3(pool.outcome(k) - y));
        }
    }
    let normalizer = ln_scale.exp() * s;
    LossProfile::with_normalizer(knots, a, b / s, normalizer)
}

/// Reference pool plus cached inverse propensities for the binary estimator.
pub struct CounterfactualEstimator<'a> {
    pool: &'a ObservationalDataset,
    kernel: KernelSpec,
    inv_p: [Vec<f64>; 2],
}

impl<'a> CounterfactualEstimator<'a> {
    pub fn new(pool: &'a ObservationalDataset, kernel: KernelSpec, prop: &dyn Propensity) -> Result<Self> {
        if pool.mode() != TreatmentMode::Binary {
            return Err(Error::Precondition("binary estimator needs binary treatments".into()));
        }
        for arm in Arm::BOTH {
            if !(0..pool.len()).any(|k| pool.arm(k) == Some(arm)) {
                return Err(Error::Precondition(format!("reference pool has no rows in arm {}", arm.code())));
            }
        }
        let mut inv_p = [vec![0.0; pool.len()], vec![0.0; pool.len()]];
        for k in 0..pool.len() {
            let arm = pool.arm(k).expect("binary");
            let p = prop.prob(pool.z(k), arm);
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::Validation(format!("propensity {p} at pool row {k} is not positive")));
            }
            inv_p[arm.index()][k] = 1.0 / p;
        }
        Ok(CounterfactualEstimator { pool, kernel, inv_p })
    }

    pub fn kernel(&self) -> KernelSpec {
        self.kernel
    }

    pub fn pool(&self) -> &ObservationalDataset {
        self.pool
    }

    /// Same pool and propensities with another kernel.
    pub fn with_kernel(&self, kernel: KernelSpec) -> CounterfactualEstimator<'a> {
        CounterfactualEstimator { pool: self.pool, kernel, inv_p: self.inv_p.clone() }
    }

    pub fn profile(&self, ev: &Evidence) -> Result<LossProfile> {
        ev.check_against(self.pool)?;
        let (fact, target) = ev.arms()?;
        let (it, ifa) = (&self.inv_p[target.index()], &self.inv_p[fact.index()]);
        assemble(self.pool, &self.kernel, &ev.z, ev.y, |k| it[k], |k| ifa[k])
            .map_err(|e| match e {
                Error::Coverage(msg) => Error::Coverage(format!("{msg} (target arm {})", target.code())),
                other => other,
            })
    }

    /// Profile with every row's contribution multiplied by `w(x_k, z_k)`.
    /// `w` is only evaluated on rows inside the kernel support, where it
    /// must be positive.
    pub fn profile_weighted(&self, ev: &Evidence, w: &dyn Fn(f64, &[f64]) -> f64) -> Result<LossProfile> {
        ev.check_against(self.pool)?;
        let (fact, target) = ev.arms()?;
        let (rel, ln_scale) = relative_kernel_weights(self.pool, &self.kernel, &ev.z)?;
        let mut weights = vec![0.0; self.pool.len()];
        for (k, r) in rel.iter().enumerate() {
            if *r == 0.0 {
                continue;
            }
            let v = w(self.pool.treatment(k), self.pool.z(k));
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Validation(format!("row weight {v} at pool row {k} is not positive")));
            }
            weights[k] = v;
        }
        let (it, ifa) = (&self.inv_p[target.index()], &self.inv_p[fact.index()]);
        assemble_relative(self.pool, &rel, ln_scale, ev.y, |k| weights[k] * it[k], |k| weights[k] * ifa[k])
    }

    /// Profile weighted by the kernel ratio `K_h(z_k - z) / mean_j K_h(z_j - z)`
    /// around the query itself.
    pub fn profile_kernel_ratio(&self, ev: &Evidence) -> Result<LossProfile> {
        let kernel = self.kernel;
        let logs: Vec<f64> = (0..self.pool.len()).map(|k| kernel.ln_scaled_weight_between(self.pool.z(k), &ev.z)).collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::Coverage(format!("{kernel} puts zero weight on every reference row")));
        }
        let ln_mean = max + (logs.iter().map(|l| (l - max).exp()).sum::<f64>() / logs.len() as f64).ln();
        let z = ev.z.clone();
        self.profile_weighted(ev, &move |_, zk| (kernel.ln_scaled_weight_between(zk, &z) - ln_mean).exp())
    }

    pub fn estimate(&self, ev: &Evidence) -> Result<CounterfactualEstimate> {
        Ok(self.profile(ev)?.minimize())
    }

    /// Estimates a batch of queries in parallel. Output order follows input.
    pub fn estimate_all(&self, evs: &[Evidence]) -> Vec<Result<CounterfactualEstimate>> {
        evs.par_iter().map(|ev| self.estimate(ev)).collect()
    }

    /// Mean CRPS of held-out factual outcomes under the kernel-weighted
    /// law of their own arm. Each row `i` is scored through the target-arm
    /// term of a pseudo-query with `x' = x_i`.
    pub fn factual_reconstruction_score(&self, holdout: &ObservationalDataset, rows: &[usize]) -> Result<f64> {
        let scores: Vec<Result<f64>> = rows
            .par_iter()
            .map(|&i| {
                let own = holdout
                    .arm(i)
                    .ok_or_else(|| Error::Precondition("holdout must be binary".into()))?;
                let ev = Evidence { x: own.other().code(), z: holdout.z(i).to_vec(), y: holdout.outcome(i), x_prime: own.code() };
                Ok(self.profile(&ev)?.crps(holdout.outcome(i)))
            })
            .collect();
        let mut sum = 0.0;
        for s in scores {
            sum += s?;
        }
        Ok(sum / rows.len() as f64)
    }
}

pub fn build_profile(pool: &ObservationalDataset, ev: &Evidence, kernel: &KernelSpec, prop: &dyn Propensity) -> Result<LossProfile> {
    ev.check_against(pool)?;
    CounterfactualEstimator::new(pool, *kernel, prop)?.profile(ev)
}

pub fn build_profile_weighted(
    pool: &ObservationalDataset,
    ev: &Evidence,
    kernel: &KernelSpec,
    prop: &dyn Propensity,
    w: &dyn Fn(f64, &[f64]) -> f64,
) -> Result<LossProfile> {
    ev.check_against(pool)?;
    CounterfactualEstimator::new(pool, *kernel, prop)?.profile_weighted(ev, w)
}

pub fn estimate_counterfactual(
    pool: &ObservationalDataset,
    ev: &Evidence,
    kernel: &KernelSpec,
    prop: &dyn Propensity,
) -> Result<CounterfactualEstimate> {
    Ok(build_profile(pool, ev, kernel, prop)?.minimize())
}

/// Continuous-treatment profile: both indicators become kernel weights in
/// the treatment, `K_{h_x}(x_k - x')` and `K_{h_x}(x_k - x)`.
///
/// `denominator(level, z_k)` plays the role of the propensity at treatment
/// `level`; `None` uses 1 (pure kernel weighting).
pub fn build_profile_continuous(
    pool: &ObservationalDataset,
    ev: &Evidence,
    kernel_z: &KernelSpec,
    kernel_x: &KernelSpec,
    denominator: Option<&dyn Fn(f64, &[f64]) -> f64>,
) -> Result<LossProfile> {
    if pool.mode() != TreatmentMode::Continuous {
        return Err(Error::Precondition("continuous estimator needs continuous treatments".into()));
    }
    ev.check_against(pool)?;
    let d = |level: f64, k: usize| denominator.map_or(1.0, |f| f(level, pool.z(k)));
    let mut target = Vec::with_capacity(pool.len());
    let mut factual = Vec::with_capacity(pool.len());
    for k in 0..pool.len() {
        let xk = pool.treatment(k);
        let (dt, df) = (d(ev.x_prime, k), d(ev.x, k));
        if !(dt > 0.0 && df > 0.0) {
            return Err(Error::Validation(format!("non-positive denominator at pool row {k}")));
        }
        target.push(kernel_x.scaled_weight(&[xk - ev.x_prime]) / dt);
        factual.push(kernel_x.scaled_weight(&[xk - ev.x]) / df);
    }
    if target.iter().all(|v| *v == 0.0) {
        return Err(Error::Coverage("treatment kernel puts zero weight on every row near x'".into()));
    }
    assemble(pool, kernel_z, &ev.z, ev.y, |k| target[k], |k| factual[k])
}

/// Outcome of scoring a kernel grid on held-out factual outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSelection {
    pub kernel: KernelSpec,
    /// Score per candidate; `None` when some held-out row had no coverage.
    pub scores: Vec<(KernelSpec, Option<f64>)>,
}

/// Picks the candidate kernel with the smallest factual reconstruction
/// score on at most `max_rows` held-out rows (evenly strided, so the choice
/// is deterministic). Ties go to the earlier candidate.
pub fn select_bandwidth(
    base: &CounterfactualEstimator<'_>,
    holdout: &ObservationalDataset,
    candidates: &[KernelSpec],
    max_rows: usize,
) -> Result<BandwidthSelection> {
    if candidates.is_empty() {
        return Err(Error::Config("empty kernel grid".into()));
    }
    let n = holdout.len();
    let take = n.min(max_rows.max(1));
    let rows: Vec<usize> = (0..take).map(|j| j * n / take).collect();
    let mut scores = Vec::with_capacity(candidates.len());
    let mut best: Option<(KernelSpec, f64)> = None;
    for &k in candidates {
        let score = base.with_kernel(k).factual_reconstruction_score(holdout, &rows).ok();
        if let Some(s) = score {
            if best.is_none_or(|(_, b)| s < b) {
                best = Some((k, s));
            }
        }
        scores.push((k, score));
    }
    let (kernel, _) = best.ok_or_else(|| Error::Coverage("every candidate kernel failed on the validation split".into()))?;
    Ok(BandwidthSelection { kernel, scores })
}

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianLaw {
    pub mean: f64,
    pub sd: f64,
}

impl GaussianLaw {
    pub fn cdf(&self, t: f64) -> f64 {
        std_normal_cdf((t - self.mean) / self.sd)
    }

    /// `E|Y - t|`.
    pub fn mean_abs_dev(&self, t: f64) -> f64 {
        let d = (t - self.mean) / self.sd;
        self.sd * (2.0 * std_normal_pdf(d) + d * (2.0 * std_normal_cdf(d) - 1.0))
    }
}

/// Closed-form conditional laws of the factual and target potential
/// outcomes at the query's covariates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationQuery {
    /// Law of `Y_x | Z = z`.
    pub factual: GaussianLaw,
    /// Law of `Y_{x'} | Z = z`.
    pub target: GaussianLaw,
    pub y: f64,
}

impl PopulationQuery {
    /// `P(Y_x <= y | z)`.
    pub fn factual_rank(&self) -> f64 {
        self.factual.cdf(self.y)
    }

    /// `E|Y_{x'} - t| + E[sign(Y_x - y)] t`.
    pub fn loss(&self, t: f64) -> f64 {
        self.target.mean_abs_dev(t) + (1.0 - 2.0 * self.factual_rank()) * t
    }

    /// `2 (P(Y_{x'} <= t) - P(Y_x <= y))`.
    pub fn derivative(&self, t: f64) -> f64 {
        2.0 * (self.target.cdf(t) - self.factual_rank())
    }

    /// Minimizer found by bisection on the sign of the derivative.
    pub fn minimizer(&self) -> Result<f64> {
        let tau = self.factual_rank();
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::Degenerate("evidence lies outside the numerical support of Y_x".into()));
        }
        let mut lo = self.target.mean - self.target.sd;
        let mut hi = self.target.mean + self.target.sd;
        while self.derivative(lo) > 0.0 {
            lo -= hi - lo;
        }
        while self.derivative(hi) < 0.0 {
            hi += hi - lo;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.derivative(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// Population ideal loss for an analytic structural model.
pub fn ideal_loss_population(t: f64, ev: &Evidence, scm: &crate::simulator::AnalyticLaws) -> Result<f64> {
    Ok(scm.population_query(ev)?.loss(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Split;
    use crate::kernels::KernelFamily;
    use crate::propensity::ConstantPropensity;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn profile(knots: &[f64], a: &[f64], b: f64) -> LossProfile {
        LossProfile::new(knots.to_vec(), a.to_vec(), b).unwrap()
    }

    #[test]
    fn weighted_median() {
        assert_eq!(profile(&[1.0, 2.0, 3.0], &[1.0; 3], 0.0).minimize().y_hat, 2.0);
    }

    /// Grid scan over [0, 4] with step 1e-4; returns (first, last) argmin.
    fn grid_minimizers(p: &LossProfile) -> (f64, f64) {
        let vals: Vec<(f64, f64)> = (0..=40_000).map(|i| {
            let t = i as f64 * 1e-4;
            (t, p.evaluate(t))
        }).collect();
        let best = vals.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
        let flat: Vec<f64> = vals.iter().filter(|v| v.1 <= best + 1e-9).map(|v| v.0).collect();
        (flat[0], *flat.last().unwrap())
    }

    #[test]
    fn flat_minimum_left_endpoint() {
        let p = profile(&[1.0, 2.0, 3.0], &[1.0; 3], 1.0);
        let (lo, hi) = grid_minimizers(&p);
        assert!((lo - 1.0).abs() < 1e-9 && (hi - 2.0).abs() < 1e-9, "{lo} {hi}");
        let est = p.minimize();
        assert_eq!(est.y_hat, 1.0);
        assert!(est.bounded);
    }

    #[test]
    fn unbounded_clamps_to_descending_side() {
        let p = profile(&[1.0, 2.0, 3.0], &[1.0; 3], 4.0);
        let est = p.minimize();
        assert!(!est.bounded);
        assert_eq!(est.y_hat, 1.0);
        // f keeps decreasing to the left of every knot
        assert!(p.evaluate(-10.0) < p.evaluate(1.0));
        let q = profile(&[1.0, 2.0, 3.0], &[1.0; 3], -4.0);
        assert_eq!(q.minimize().y_hat, 3.0);
        assert!(!q.minimize().bounded);
    }

    #[test]
    fn zero_weights_give_coverage_error() {
        assert!(matches!(LossProfile::new(vec![1.0], vec![0.0], 0.0), Err(Error::Coverage(_))));
        assert!(LossProfile::new(vec![1.0], vec![-1.0], 0.0).is_err());
    }

    #[test]
    fn crps_matches_pairwise_formula() {
        let p = profile(&[0.5, -1.0, 2.0, 2.0], &[0.1, 0.4, 0.2, 0.3], 0.0);
        for y in [-2.0, 0.0, 0.7, 3.0] {
            let w: Vec<f64> = p.weights().iter().map(|a| a / p.total_a()).collect();
            let v = p.knots();
            let mut first = 0.0;
            let mut pair = 0.0;
            for i in 0..v.len() {
                first += w[i] * (v[i] - y).abs();
                for j in 0..v.len() {
                    pair += w[i] * w[j] * (v[i] - v[j]).abs();
                }
            }
            assert!((p.crps(y) - (first - 0.5 * pair)).abs() < 1e-12);
        }
    }

    /// Two arms of four rows each at z = 0 with outcomes 1..4 (control) and
    /// 10..13 (treated).
    fn balanced() -> ObservationalDataset {
        let x = vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        let y = vec![1.0, 2.0, 3.0, 4.0, 10.0, 11.0, 12.0, 13.0];
        let cov: Vec<f64> = (0..8).map(|i| (i % 4) as f64 * 0.1).collect();
        ObservationalDataset::all_train(TreatmentMode::Binary, x, Array2::from_shape_vec((8, 1), cov).unwrap(), y).unwrap()
    }

    #[test]
    fn flat_kernel_slope_is_one_below_all_outcomes() {
        // Hand computation: flat kernel, p = 0.5, y below every control
        // outcome. b = (1/8) * sum_{control} 2 * (+1) = 4 * 2 / 8 = 1.
        let ds = balanced();
        let ev = Evidence::new(0.0, vec![0.15], -5.0, 1.0).unwrap();
        let p = build_profile(&ds, &ev, &KernelSpec::gaussian(1e6).unwrap(), &ConstantPropensity(0.5)).unwrap();
        assert!((p.slope() - 1.0).abs() < 1e-3);
        assert!((p.total_a() - 1.0).abs() < 1e-3);
        assert_eq!(p.knots(), &[10.0, 11.0, 12.0, 13.0]);
        // |b| >= total_a up to rounding: estimate pinned at the lowest knot
        assert_eq!(p.minimize().y_hat, 10.0);
    }

    #[test]
    fn tied_evidence_contributes_zero_sign() {
        let ds = balanced();
        let kernel = KernelSpec::gaussian(1e6).unwrap();
        let prop = ConstantPropensity(0.5);
        let at = build_profile(&ds, &Evidence::new(0.0, vec![0.0], 2.0, 1.0).unwrap(), &kernel, &prop).unwrap();
        // signs: -1, 0, +1, +1 -> b = 2 * 1 / 8
        assert!((at.slope() - 0.25).abs() < 1e-6);
        // quantile matching: rank of 2 among {1,2,3,4} maps to 11
        assert_eq!(at.minimize().y_hat, 11.0);
    }

    #[test]
    fn epanechnikov_without_target_rows_is_coverage_error() {
        let x = vec![0.0, 0.0, 1.0, 1.0];
        let cov = vec![0.0, 0.1, 5.0, 5.1];
        let ds = ObservationalDataset::all_train(TreatmentMode::Binary, x, Array2::from_shape_vec((4, 1), cov).unwrap(), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ev = Evidence::new(0.0, vec![0.0], 1.5, 1.0).unwrap();
        let r = build_profile(&ds, &ev, &KernelSpec::epanechnikov(1.0).unwrap(), &ConstantPropensity(0.5));
        assert!(matches!(r, Err(Error::Coverage(_))), "{r:?}");
        let far = Evidence::new(0.0, vec![20.0], 1.5, 1.0).unwrap();
        assert!(matches!(
            build_profile(&ds, &far, &KernelSpec::epanechnikov(1.0).unwrap(), &ConstantPropensity(0.5)),
            Err(Error::Coverage(_))
        ));
    }

    #[test]
    fn same_arm_query_rejected() {
        let ds = balanced();
        let ev = Evidence::new(1.0, vec![0.0], 2.0, 1.0).unwrap();
        let r = estimate_counterfactual(&ds, &ev, &KernelSpec::gaussian(1.0).unwrap(), &ConstantPropensity(0.5));
        assert!(matches!(r, Err(Error::Precondition(_))));
    }

    #[test]
    fn weighted_profiles() {
        let ds = balanced();
        let kernel = KernelSpec::gaussian(0.5).unwrap();
        let prop = ConstantPropensity(0.3);
        let ev = Evidence::new(0.0, vec![0.1], 2.5, 1.0).unwrap();
        let plain = build_profile(&ds, &ev, &kernel, &prop).unwrap();
        let one = build_profile_weighted(&ds, &ev, &kernel, &prop, &|_, _| 1.0).unwrap();
        assert_eq!(plain, one);
        let five = build_profile_weighted(&ds, &ev, &kernel, &prop, &|_, _| 5.0).unwrap();
        assert_eq!(five.minimize().y_hat, plain.minimize().y_hat);
        assert!((five.total_a() - 5.0 * plain.total_a()).abs() < 1e-12);
        let bad = build_profile_weighted(&ds, &ev, &kernel, &prop, &|_, _| 0.0);
        assert!(matches!(bad, Err(Error::Validation(_))));
    }

    #[test]
    fn continuous_degenerate_limit_matches_binary() {
        let bin = balanced();
        let cont = ObservationalDataset::all_train(
            TreatmentMode::Continuous,
            bin.treatments().to_vec(),
            bin.covariates().clone(),
            bin.outcomes().to_vec(),
        )
        .unwrap();
        let kz = KernelSpec::gaussian(0.7).unwrap();
        let kx = KernelSpec::epanechnikov(1e-3).unwrap();
        for y in [0.5, 1.0, 2.5, 4.0, 9.0] {
            let ev = Evidence::new(0.0, vec![0.12], y, 1.0).unwrap();
            let pb = build_profile(&bin, &ev, &kz, &ConstantPropensity(0.5)).unwrap();
            let pc = build_profile_continuous(&cont, &ev, &kz, &kx, None).unwrap();
            // K_hx(0) = 750 vs 1 / 0.5 = 2
            let c = 750.0 / 2.0;
            assert!((pc.total_a() - c * pb.total_a()).abs() < 1e-9 * pc.total_a());
            assert!((pc.slope() - c * pb.slope()).abs() < 1e-9 * pc.total_a());
            assert_eq!(pc.minimize().y_hat, pb.minimize().y_hat);
        }
    }

    #[test]
    fn continuous_errors_and_constant_outcomes() {
        let x = vec![0.0, 0.5, 1.0, 1.5];
        let cov = vec![0.0, 0.1, 0.2, 0.3];
        let ds = ObservationalDataset::all_train(TreatmentMode::Continuous, x, Array2::from_shape_vec((4, 1), cov).unwrap(), vec![7.0; 4]).unwrap();
        let kz = KernelSpec::gaussian(1.0).unwrap();
        let kx = KernelSpec::epanechnikov(0.1).unwrap();
        let far = Evidence::new(10.0, vec![0.1], 7.0, 20.0).unwrap();
        assert!(matches!(build_profile_continuous(&ds, &far, &kz, &kx, None), Err(Error::Coverage(_))));
        let ev = Evidence::new(0.0, vec![0.1], 3.0, 1.0).unwrap();
        let p = build_profile_continuous(&ds, &ev, &kz, &kx, None).unwrap();
        let est = p.minimize();
        if est.bounded {
            assert_eq!(est.y_hat, 7.0);
        }
        let wide = KernelSpec::epanechnikov(2.0).unwrap();
        let est = build_profile_continuous(&ds, &Evidence::new(0.5, vec![0.1], 7.0, 1.0).unwrap(), &kz, &wide, Some(&|_, _| 0.5)).unwrap().minimize();
        assert!(est.bounded);
        assert_eq!(est.y_hat, 7.0);
    }

    #[test]
    fn population_loss_values() {
        let q = PopulationQuery {
            factual: GaussianLaw { mean: 0.0, sd: 1.0 },
            target: GaussianLaw { mean: 0.0, sd: 1.0 },
            y: 0.0,
        };
        assert!((q.loss(0.0) - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-12);
        assert!((q.loss(0.0) - 0.797885).abs() < 1e-6);
        let q = PopulationQuery {
            factual: GaussianLaw { mean: 1.0, sd: 0.5 },
            target: GaussianLaw { mean: -2.0, sd: 3.0 },
            y: 1.3,
        };
        for t in [-5.0, -2.0, 0.0, 0.4, 3.0] {
            let h = 1e-5;
            let fd = (q.loss(t + h) - q.loss(t - h)) / (2.0 * h);
            assert!((fd - q.derivative(t)).abs() < 1e-6);
        }
        // quantile-matched value: -2 + 3 * (0.3 / 0.5)
        let t_star = -2.0 + 3.0 * 0.6;
        assert!(q.derivative(t_star).abs() < 1e-9);
        assert!((q.minimizer().unwrap() - t_star).abs() < 1e-9);
    }

    #[test]
    fn bandwidth_selection_prefers_local_kernel() {
        // Outcome depends strongly on z: a narrow kernel should score better.
        let n = 400;
        let mut x = Vec::new();
        let mut cov = Vec::new();
        let mut y = Vec::new();
        let mut split = Vec::new();
        for i in 0..n {
            let z = (i as f64 / n as f64) * 10.0 - 5.0;
            x.push((i % 2) as f64);
            cov.push(z);
            y.push(3.0 * z + ((i * 7919) % 13) as f64 * 0.05);
            split.push(if i % 4 == 3 { Split::Val } else { Split::Train });
        }
        let ds = ObservationalDataset::new(TreatmentMode::Binary, x, Array2::from_shape_vec((n, 1), cov).unwrap(), y, split).unwrap();
        let pool = ds.split_view(Split::Train).unwrap();
        let val = ds.split_view(Split::Val).unwrap();
        let est = CounterfactualEstimator::new(&pool, KernelSpec::gaussian(1.0).unwrap(), &ConstantPropensity(0.5)).unwrap();
        let grid: Vec<KernelSpec> = [0.3, 3.0, 9.0].iter().map(|&h| KernelSpec::gaussian(h).unwrap()).collect();
        let sel = select_bandwidth(&est, &val, &grid, 50).unwrap();
        assert_eq!(sel.kernel.bandwidth(), 0.3);
        assert_eq!(sel.scores.len(), 3);
        // Epanechnikov with tiny h leaves holdout rows uncovered
        let tiny = [KernelSpec::new(KernelFamily::Epanechnikov, 1e-4).unwrap()];
        assert!(matches!(select_bandwidth(&est, &val, &tiny, 50), Err(Error::Coverage(_))));
    }

    fn random_profile() -> impl Strategy<Value = LossProfile> {
        (1usize..30)
            .prop_flat_map(|n| {
                (
                    prop::collection::vec(-20i32..20, n),
                    prop::collection::vec(0.01f64..3.0, n),
                    -0.999f64..0.999,
                )
            })
            .prop_map(|(k, a, frac)| {
                let total: f64 = a.iter().sum();
                let knots: Vec<f64> = k.iter().map(|v| *v as f64 * 0.25).collect();
                LossProfile::new(knots, a, frac * total).unwrap()
            })
    }

    proptest! {
        #[test]
        fn profiles_are_convex(p in random_profile(), t in prop::collection::vec(-8.0f64..8.0, 3)) {
            let mut t = t;
            t.sort_by(f64::total_cmp);
            if t[2] - t[0] > 1e-9 {
                let (f1, f2, f3) = (p.evaluate(t[0]), p.evaluate(t[1]), p.evaluate(t[2]));
                let chord = f1 + (f3 - f1) * (t[1] - t[0]) / (t[2] - t[0]);
                prop_assert!(f2 <= chord + 1e-9 * (1.0 + chord.abs()));
            }
        }

        #[test]
        fn minimizer_is_a_global_minimum(p in random_profile()) {
            let est = p.minimize();
            prop_assert!(est.bounded);
            let f = p.evaluate(est.y_hat);
            for k in p.knots() {
                prop_assert!(f <= p.evaluate(*k) + 1e-9);
            }
            // nothing strictly to the left is as good
            prop_assert!(p.evaluate(est.y_hat - 1e-3) > f - 1e-12);
        }
    }
}
