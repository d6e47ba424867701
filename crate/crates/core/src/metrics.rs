//! Evaluation metrics for predicted individual treatment effects.

use serde::{Deserialize, Serialize};

use crate::dataset::{Arm, PotentialOutcomeTable};
use crate::error::{Error, Result};

/// Predicted potential outcomes, one entry per evaluated unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItePredictions {
    pub y0_hat: Vec<f64>,
    pub y1_hat: Vec<f64>,
}

impl ItePredictions {
    pub fn new(y0_hat: Vec<f64>, y1_hat: Vec<f64>) -> Result<Self> {
        if y0_hat.len() != y1_hat.len() {
            return Err(Error::Alignment("predicted arms differ in length".into()));
        }
        if y0_hat.iter().chain(&y1_hat).any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite prediction".into()));
        }
        Ok(ItePredictions { y0_hat, y1_hat })
    }

    /// Pairs each unit's observed outcome with its estimated counterfactual.
    pub fn from_factual(arms: &[Arm], factual: &[f64], counterfactual: &[f64]) -> Result<Self> {
        if arms.len() != factual.len() || arms.len() != counterfactual.len() {
            return Err(Error::Alignment("factual and counterfactual vectors differ in length".into()));
        }
        let mut y0 = Vec::with_capacity(arms.len());
        let mut y1 = Vec::with_capacity(arms.len());
        for ((arm, f), c) in arms.iter().zip(factual).zip(counterfactual) {
            match arm {
                Arm::Control => {
                    y0.push(*f);
                    y1.push(*c);
                }
                Arm::Treated => {
                    y0.push(*c);
                    y1.push(*f);
                }
            }
        }
        Self::new(y0, y1)
    }

    pub fn len(&self) -> usize {
        self.y0_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y0_hat.is_empty()
    }

    pub fn ite(&self, i: usize) -> f64 {
        self.y1_hat[i] - self.y0_hat[i]
    }
}

fn aligned(pred: &ItePredictions, truth: &PotentialOutcomeTable) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::Validation("no units to evaluate".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::Alignment(format!("{} predictions for {} units", pred.len(), truth.len())));
    }
    Ok(())
}

/// Mean squared error of the predicted individual effects.
pub fn pehe(pred: &ItePredictions, truth: &PotentialOutcomeTable) -> Result<f64> {
    aligned(pred, truth)?;
    let n = pred.len() as f64;
    Ok((0..pred.len()).map(|i| (pred.ite(i) - truth.ite(i)).powi(2)).sum::<f64>() / n)
}

/// `|mean predicted effect - mean true effect|`.
pub fn ate_error(pred: &ItePredictions, truth: &PotentialOutcomeTable) -> Result<f64> {
    aligned(pred, truth)?;
    let n = pred.len() as f64;
    let diff: f64 = (0..pred.len()).map(|i| pred.ite(i) - truth.ite(i)).sum();
    Ok((diff / n).abs())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `|ATT - mean_{i in T} (y1_hat - y0_hat)|` with
/// `ATT = |mean(treated outcomes) - mean(randomized control outcomes)|`.
pub fn att_error(
    pred: &ItePredictions,
    treated_outcomes: &[f64],
    control_randomized_outcomes: &[f64],
    treated_index: &[usize],
) -> Result<f64> {
    if treated_outcomes.is_empty() || control_randomized_outcomes.is_empty() || treated_index.is_empty() {
        return Err(Error::Validation("treated and randomized control sets must be non-empty".into()));
    }
    if let Some(&bad) = treated_index.iter().find(|&&i| i >= pred.len()) {
        return Err(Error::Alignment(format!("treated index {bad} out of range")));
    }
    let att = (mean(treated_outcomes) - mean(control_randomized_outcomes)).abs();
    let est = treated_index.iter().map(|&i| pred.ite(i)).sum::<f64>() / treated_index.len() as f64;
    Ok((att - est).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyRisk {
    pub risk: f64,
    /// Some conditioning cell was empty and contributed 0.
    pub empty_cell: bool,
}

/// Risk of the policy that treats iff `y1_hat - y0_hat > 0`:
/// `1 - [E(Y | treat, X = 1) P(treat) + E(Y | not treat, X = 0) P(not treat)]`.
pub fn policy_risk(pred: &ItePredictions, arms: &[Arm], outcomes: &[f64]) -> Result<PolicyRisk> {
    if pred.is_empty() {
        return Err(Error::Validation("no units to evaluate".into()));
    }
    if arms.len() != pred.len() || outcomes.len() != pred.len() {
        return Err(Error::Alignment("predictions, treatments and outcomes differ in length".into()));
    }
    let n = pred.len() as f64;
    let mut recommend_1 = 0usize;
    let (mut sum1, mut cnt1, mut sum0, mut cnt0) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..pred.len() {
        let treat = pred.ite(i) > 0.0;
        if treat {
            recommend_1 += 1;
        }
        match (treat, arms[i]) {
            (true, Arm::Treated) => {
                sum1 += outcomes[i];
                cnt1 += 1;
            }
            (false, Arm::Control) => {
                sum0 += outcomes[i];
                cnt0 += 1;
            }
            _ => {}
        }
    }
    let p1 = recommend_1 as f64 / n;
    let mut empty_cell = false;
    let mut cell = |sum: f64, cnt: usize, weight: f64| {
        if cnt == 0 {
            if weight > 0.0 {
                empty_cell = true;
            }
            0.0
        } else {
            sum / cnt as f64 * weight
        }
    };
    let value = cell(sum1, cnt1, p1) + cell(sum0, cnt0, 1.0 - p1);
    Ok(PolicyRisk { risk: 1.0 - value, empty_cell })
}
