//! Large-sample behaviour of the kernel estimator against known answers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use rankcf::dataset::{Arm, Evidence, ObservationalDataset, TreatmentMode};
use rankcf::estimator::{ideal_loss_population, CounterfactualEstimator};
use rankcf::kernels::KernelSpec;
use rankcf::propensity::{ConstantPropensity, FnPropensity};
use rankcf::simulator::{simulate, SimConfig};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 { v[k / 2] } else { 0.5 * (v[k / 2 - 1] + v[k / 2]) }
}

/// sup over a t-grid of |R_hat(t) - R(t)| for one simulated sample.
fn sup_loss_gap(n: usize, seed: u64) -> f64 {
    let cfg = SimConfig { m: 1, n, alpha: 2.0, seed, ..SimConfig::default() };
    let sim = simulate(&cfg).unwrap();
    let laws = sim.analytic_laws().unwrap();
    let ds = &sim.dataset;
    let h = 0.8 * (n as f64).powf(-0.2);
    let est = CounterfactualEstimator::new(ds, KernelSpec::gaussian(h).unwrap(), &sim.propensity).unwrap();
    let z = vec![0.3];
    let fact = laws.law(Arm::Control, &z);
    let ev = Evidence::new(0.0, z, fact.mean + 0.4 * fact.sd, 1.0).unwrap();
    let p = est.profile(&ev).unwrap();
    let target = laws.law(Arm::Treated, &ev.z);
    (0..=60)
        .map(|i| target.mean + target.sd * (-3.0 + 0.1 * i as f64))
        .map(|t| (p.evaluate(t) - ideal_loss_population(t, &ev, &laws).unwrap()).abs())
        .fold(0.0, f64::max)
}

#[test]
fn estimated_loss_converges_uniformly() {
    let sizes = [500, 2000, 8000, 32_000];
    let meds: Vec<f64> = sizes.iter().map(|&n| median((0..20).map(|s| sup_loss_gap(n, s)).collect())).collect();
    for w in meds.windows(2) {
        assert!(w[1] < w[0], "median sup gap not decreasing: {meds:?}");
    }
    // roughly the N^(-1/2) rate from 500 to 32000 rows
    assert!(meds[3] < 0.25 * meds[0], "{meds:?}");
}

/// Z uniform on {-1, +1}, X ~ Bernoulli(1/2), Y = X + Z + U.
fn additive_design(n: usize, seed: u64) -> ObservationalDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nd = Normal::new(0.0, 1.0).unwrap();
    let (mut x, mut z, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let zi = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let xi = if rng.random::<bool>() { 1.0 } else { 0.0 };
        x.push(xi);
        z.push(zi);
        y.push(xi + zi + nd.sample(&mut rng));
    }
    ObservationalDataset::all_train(TreatmentMode::Binary, x, ndarray::Array2::from_shape_vec((n, 1), z).unwrap(), y).unwrap()
}

fn check_shift(n: usize, seed: u64, qs: &[f64]) {
    let ds = additive_design(n, seed);
    let prop = ConstantPropensity(0.5);
    let est = CounterfactualEstimator::new(&ds, KernelSpec::gaussian(0.1).unwrap(), &prop).unwrap();
    for z in [-1.0, 1.0] {
        for &q in qs {
            let y = z + q;
            let y1 = est.estimate(&Evidence::new(0.0, vec![z], y, 1.0).unwrap()).unwrap().y_hat;
            assert!((y1 - (y + 1.0)).abs() < 0.05, "n={n} z={z} y={y}: {y1}");
            let y0 = est.estimate(&Evidence::new(1.0, vec![z], y + 1.0, 0.0).unwrap()).unwrap().y_hat;
            assert!((y0 - y).abs() < 0.05, "n={n} z={z} y={y}: {y0}");
        }
    }
}

// Arm counts within a stratum differ by O(sqrt(N)), which moves the matched
// rank by (n1 - n0) / (2 n1); in the tails that costs more in outcome units.
#[test]
fn additive_noise_shifts_by_treatment_effect() {
    check_shift(100_000, 11, &[-0.5, 0.0, 0.5, 1.0]);
    check_shift(1_000_000, 11, &[-1.5, -0.3, 0.0, 0.8, 1.9]);
}

#[test]
fn error_shrinks_with_sample_size() {
    let ds_small = additive_design(2_000, 12);
    let ds_big = additive_design(64_000, 12);
    let prop = ConstantPropensity(0.5);
    let err = |ds: &ObservationalDataset| {
        let est = CounterfactualEstimator::new(ds, KernelSpec::gaussian(0.1).unwrap(), &prop).unwrap();
        let qs = [-1.2, -0.6, 0.0, 0.6, 1.2];
        qs.iter()
            .map(|q| (est.estimate(&Evidence::new(0.0, vec![1.0], 1.0 + q, 1.0).unwrap()).unwrap().y_hat - (2.0 + q)).abs())
            .sum::<f64>()
            / qs.len() as f64
    };
    assert!(err(&ds_big) < err(&ds_small));
}

#[test]
fn oracle_and_constant_propensity_agree_when_assignment_is_random() {
    let ds = additive_design(20_000, 13);
    let constant = ConstantPropensity(0.5);
    let closure = FnPropensity(|_: &[f64], _: Arm| 0.5);
    let a = CounterfactualEstimator::new(&ds, KernelSpec::epanechnikov(0.5).unwrap(), &constant).unwrap();
    let b = CounterfactualEstimator::new(&ds, KernelSpec::epanechnikov(0.5).unwrap(), &closure).unwrap();
    for q in [-1.0, 0.0, 1.0] {
        let ev = Evidence::new(1.0, vec![-1.0], q, 0.0).unwrap();
        assert_eq!(a.estimate(&ev).unwrap(), b.estimate(&ev).unwrap());
    }
}
