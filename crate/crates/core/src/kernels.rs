//! Smoothing kernels and bandwidth-scaled weights.
//!
//! Multivariate weights use the product rule with one shared bandwidth:
//! `K_h(delta) = prod_j K(delta_j / h) / h`. Both kernels are symmetric
//! with unit mass and zero first moment.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::ObservationalDataset;
use crate::error::{Error, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Epanechnikov,
    Gaussian,
}

impl KernelFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            KernelFamily::Epanechnikov => "epanechnikov",
            KernelFamily::Gaussian => "gaussian",
        }
    }

    /// `K(u)`.
    pub fn value(self, u: f64) -> f64 {
        match self {
            KernelFamily::Epanechnikov => {
                if u.abs() <= 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
            KernelFamily::Gaussian => (-0.5 * u * u).exp() / (2.0 * PI).sqrt(),
        }
    }

    /// `ln K(u)`, `-inf` outside the support.
    pub fn ln_value(self, u: f64) -> f64 {
        match self {
            KernelFamily::Epanechnikov => {
                if u.abs() < 1.0 {
                    (0.75 * (1.0 - u * u)).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            KernelFamily::Gaussian => -0.5 * u * u - LN_SQRT_2PI,
        }
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "epanechnikov" => Ok(KernelFamily::Epanechnikov),
            "gaussian" => Ok(KernelFamily::Gaussian),
            other => Err(Error::Config(format!("unknown kernel '{other}'"))),
        }
    }
}

/// Kernel family plus a positive bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    family: KernelFamily,
    bandwidth: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, bandwidth: f64) -> Result<Self> {
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(Error::Config(format!("bandwidth must be positive, got {bandwidth}")));
        }
        Ok(KernelSpec { family, bandwidth })
    }

    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        Self::new(KernelFamily::Gaussian, bandwidth)
    }

    pub fn epanechnikov(bandwidth: f64) -> Result<Self> {
        Self::new(KernelFamily::Epanechnikov, bandwidth)
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn kernel_value(&self, u: f64) -> f64 {
        self.family.value(u)
    }

    /// Product-kernel weight `prod_j K(delta_j / h) / h`.
    pub fn scaled_weight(&self, delta: &[f64]) -> f64 {
        let h = self.bandwidth;
        delta.iter().map(|d| self.family.value(d / h) / h).product()
    }

    /// Logarithm of [`KernelSpec::scaled_weight`] for the difference
    /// `a - b`. Avoids underflow in high dimension.
    pub fn ln_scaled_weight_between(&self, a: &[f64], b: &[f64]) -> f64 {
        let h = self.bandwidth;
        let m = a.len() as f64;
        match self.family {
            KernelFamily::Gaussian => {
                let d2: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
                -0.5 * d2 / (h * h) - m * (LN_SQRT_2PI + h.ln())
            }
            KernelFamily::Epanechnikov => {
                let mut acc = -m * h.ln();
                for (p, q) in a.iter().zip(b) {
                    let u = (p - q) / h;
                    if u.abs() >= 1.0 {
                        return f64::NEG_INFINITY;
                    }
                    acc += (0.75 * (1.0 - u * u)).ln();
                }
                acc
            }
        }
    }

    /// Kernel weight of every dataset row relative to `query_z`:
    /// `K_h(z_k - query_z)` for `k = 1..N`.
    pub fn weight_row(&self, query_z: &[f64], ds: &ObservationalDataset) -> Result<Vec<f64>> {
        if query_z.len() != ds.dim() {
            return Err(Error::Alignment(format!(
                "query has {} covariates, dataset has {}",
                query_z.len(),
                ds.dim()
            )));
        }
        let mut delta = vec![0.0; ds.dim()];
        Ok((0..ds.len())
            .map(|k| {
                for ((d, a), b) in delta.iter_mut().zip(ds.z(k)).zip(query_z) {
                    *d = a - b;
                }
                self.scaled_weight(&delta)
            })
            .collect())
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(h={})", self.family, self.bandwidth)
    }
}

pub fn kernel_value(spec: &KernelSpec, u: f64) -> f64 {
    spec.kernel_value(u)
}

pub fn scaled_weight(spec: &KernelSpec, delta: &[f64]) -> f64 {
    spec.scaled_weight(delta)
}

pub fn weight_row(spec: &KernelSpec, query_z: &[f64], ds: &ObservationalDataset) -> Result<Vec<f64>> {
    spec.weight_row(query_z, ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::TreatmentMode;
    use ndarray::array;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn point_values() {
        let ep = KernelSpec::epanechnikov(1.0).unwrap();
        let ga = KernelSpec::gaussian(1.0).unwrap();
        assert_eq!(ep.kernel_value(0.0), 0.75);
        assert_eq!(ep.kernel_value(1.5), 0.0);
        assert!(close(ga.kernel_value(0.0), 0.398942, 1e-6));
    }

    #[test]
    fn scaled_weights() {
        assert!(close(KernelSpec::gaussian(1.0).unwrap().scaled_weight(&[0.0]), 0.398942, 1e-6));
        assert!(close(KernelSpec::gaussian(2.0).unwrap().scaled_weight(&[0.0]), 0.199471, 1e-6));
        assert_eq!(KernelSpec::epanechnikov(1.0).unwrap().scaled_weight(&[0.5, 2.0]), 0.0);
    }

    #[test]
    fn bad_bandwidth() {
        assert!(KernelSpec::gaussian(0.0).is_err());
        assert!(KernelSpec::gaussian(-1.0).is_err());
        assert!(KernelSpec::gaussian(f64::NAN).is_err());
    }

    fn three_points() -> ObservationalDataset {
        ObservationalDataset::all_train(
            TreatmentMode::Binary,
            vec![0.0, 1.0, 0.0],
            array![[0.0, 0.0], [1.0, 0.0], [3.0, 4.0]],
            vec![0.0, 0.0, 0.0],
        )
        .unwrap()
    }

    #[test]
    fn epanechnikov_support_truncation() {
        let ds = three_points();
        let w = KernelSpec::epanechnikov(1.0).unwrap().weight_row(&[0.0, 0.0], &ds).unwrap();
        assert_eq!(w, vec![0.5625, 0.0, 0.0]);
    }

    #[test]
    fn gaussian_row_matches_closed_form() {
        // exp(-d^2 / 2 h^2) / (sqrt(2 pi) h)^m with squared distances 0, 1, 25
        // from the origin, h = 2, m = 2; values frozen from a direct evaluation.
        let ds = three_points();
        let w = KernelSpec::gaussian(2.0).unwrap().weight_row(&[0.0, 0.0], &ds).unwrap();
        let expected = [0.039788735772973836, 0.0351134360774063, 0.0017481950426164478];
        for (a, b) in w.iter().zip(expected) {
            assert!(close(*a, b, 1e-16), "{a} vs {b}");
        }
    }

    #[test]
    fn flat_limit() {
        let ds = three_points();
        let w = KernelSpec::gaussian(1e6).unwrap().weight_row(&[0.5, 0.5], &ds).unwrap();
        let max = w.iter().cloned().fold(f64::MIN, f64::max);
        let min = w.iter().cloned().fold(f64::MAX, f64::min);
        assert!((max - min) / max < 1e-6);
    }

    #[test]
    fn dimension_mismatch() {
        let ds = three_points();
        assert!(KernelSpec::gaussian(1.0).unwrap().weight_row(&[0.0], &ds).is_err());
    }

    #[test]
    fn unit_mass_and_zero_first_moment() {
        for fam in [KernelFamily::Epanechnikov, KernelFamily::Gaussian] {
            let (lo, hi, steps) = (-10.0, 10.0, 200_000);
            let dx = (hi - lo) / steps as f64;
            let mut mass = 0.0;
            let mut first = 0.0;
            for i in 0..steps {
                let u = lo + (i as f64 + 0.5) * dx;
                mass += fam.value(u) * dx;
                first += u * fam.value(u) * dx;
            }
            assert!((mass - 1.0).abs() < 1e-4, "{fam}: {mass}");
            assert!(first.abs() < 1e-9, "{fam}: {first}");
        }
    }

    #[test]
    fn log_weight_agrees() {
        let a = [0.3, -0.2, 0.1];
        let b = [0.0, 0.1, -0.4];
        for fam in [KernelFamily::Epanechnikov, KernelFamily::Gaussian] {
            let spec = KernelSpec::new(fam, 0.8).unwrap();
            let delta: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p - q).collect();
            let direct = spec.scaled_weight(&delta);
            let via_log = spec.ln_scaled_weight_between(&a, &b).exp();
            assert!((direct - via_log).abs() <= 1e-14 * direct.max(1.0));
        }
    }

    proptest! {
        #[test]
        fn symmetric(u in -50.0f64..50.0) {
            for fam in [KernelFamily::Epanechnikov, KernelFamily::Gaussian] {
                prop_assert_eq!(fam.value(u), fam.value(-u));
            }
        }

        // Shrinking h shifts relative weight toward the query: for any two
        // points the weight ratio near/far never decreases.
        #[test]
        fn gaussian_concentrates(
            near in 0.0f64..2.0,
            extra in 0.01f64..3.0,
            h_small in 0.1f64..2.0,
            factor in 1.01f64..5.0,
        ) {
            let far = near + extra;
            let small = KernelSpec::gaussian(h_small).unwrap();
            let large = KernelSpec::gaussian(h_small * factor).unwrap();
            let ratio = |k: &KernelSpec| k.ln_scaled_weight_between(&[far], &[0.0]) - k.ln_scaled_weight_between(&[near], &[0.0]);
            prop_assert!(ratio(&small) <= ratio(&large) + 1e-12);
        }
    }
}
