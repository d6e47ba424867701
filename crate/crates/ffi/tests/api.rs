use std::ffi::{CStr, CString};
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::ptr;

use rankcf_ffi::*;

fn last_error() -> String {
    let p = cf_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

/// Two arms, one covariate, y1 = y0 + 1 with a rank-preserving shift.
fn toy() -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = 400;
    let mut x = Vec::new();
    let mut z = Vec::new();
    let mut y = Vec::new();
    for i in 0..n {
        let zi = (i % 20) as f64 / 10.0 - 1.0;
        let u = ((i * 7919) % 101) as f64 / 100.0 - 0.5;
        let arm = (i % 2) as f64;
        x.push(arm);
        z.push(zi);
        y.push(zi + u + arm);
    }
    (x, z, y)
}

#[test]
fn estimate_roundtrip() {
    let (x, z, y) = toy();
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(cf_dataset_from_arrays(x.as_ptr(), z.as_ptr(), y.as_ptr(), x.len(), 1, &mut ds), CfStatus::Ok);
        assert_eq!(cf_dataset_len(ds), 400);
        assert_eq!(cf_dataset_dim(ds), 1);

        let mut est = ptr::null_mut();
        assert_eq!(cf_estimator_new(ds, CfKernel::Gaussian, 0.2, 0.5, 0.0, 0.01, &mut est), CfStatus::Ok);
        let mut out = CfEstimate::default();
        let zq = [0.0];
        assert_eq!(cf_estimate(est, 0.0, zq.as_ptr(), 1, 0.1, 1.0, &mut out), CfStatus::Ok);
        assert!(out.bounded == 1 && out.coverage_ok == 1);
        assert!((out.y_hat - 1.1).abs() < 0.15, "{}", out.y_hat);

        // logistic propensity path
        let mut est2 = ptr::null_mut();
        assert_eq!(cf_estimator_new(ds, CfKernel::Epanechnikov, 0.5, 0.0, 1e-4, 0.01, &mut est2), CfStatus::Ok);
        assert_eq!(cf_estimate(est2, 1.0, zq.as_ptr(), 1, 1.1, 0.0, &mut out), CfStatus::Ok);
        assert!((out.y_hat - 0.1).abs() < 0.15, "{}", out.y_hat);

        // dimension mismatch is an input error
        let bad = [0.0, 0.0];
        assert_eq!(cf_estimate(est, 0.0, bad.as_ptr(), 2, 0.1, 1.0, &mut out), CfStatus::InvalidInput);
        assert!(!last_error().is_empty());

        cf_estimator_free(est);
        cf_estimator_free(est2);
        cf_dataset_free(ds);
    }
}

#[test]
fn errors_are_reported() {
    unsafe {
        let mut ds = ptr::null_mut();
        let one = [1.0];
        assert_eq!(cf_dataset_from_arrays(ptr::null(), one.as_ptr(), one.as_ptr(), 1, 1, &mut ds), CfStatus::NullPointer);
        assert!(last_error().contains("treatments"));
        assert!(ds.is_null());

        let path = CString::new("/nonexistent/data.csv").unwrap();
        assert_eq!(cf_dataset_load_csv(path.as_ptr(), &mut ds), CfStatus::Runtime);

        let mut est = ptr::null_mut();
        assert_eq!(cf_estimator_new(ptr::null(), CfKernel::Gaussian, 1.0, 0.5, 0.0, 0.01, &mut est), CfStatus::NullPointer);

        let mut out = CfEstimate::default();
        let k = [1.0, 2.0];
        let zero = [0.0, 0.0];
        assert_eq!(cf_minimize_profile(k.as_ptr(), zero.as_ptr(), 2, 0.0, &mut out), CfStatus::Coverage);

        // a successful call clears the message
        let a = [1.0, 1.0];
        assert_eq!(cf_minimize_profile(k.as_ptr(), a.as_ptr(), 2, 0.0, &mut out), CfStatus::Ok);
        assert!(cf_last_error_message().is_null());

        assert_eq!(cf_dataset_len(ptr::null()), 0);
        cf_dataset_free(ptr::null_mut());
        cf_estimator_free(ptr::null_mut());
    }
}

#[test]
fn minimize_and_kendall() {
    unsafe {
        let k = [1.0, 2.0, 3.0];
        let a = [1.0, 1.0, 1.0];
        let mut out = CfEstimate::default();
        assert_eq!(cf_minimize_profile(k.as_ptr(), a.as_ptr(), 3, 0.0, &mut out), CfStatus::Ok);
        assert_eq!(out.y_hat, 2.0);
        assert_eq!(out.loss_at_min, 2.0);
        assert_eq!(cf_minimize_profile(k.as_ptr(), a.as_ptr(), 3, 4.0, &mut out), CfStatus::Ok);
        assert_eq!((out.y_hat, out.bounded), (1.0, 0));

        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [1.0, 3.0, 2.0, 4.0];
        let mut r = CfRankReport::default();
        assert_eq!(cf_kendall(xs.as_ptr(), ys.as_ptr(), 4, &mut r), CfStatus::Ok);
        assert_eq!((r.n_concordant, r.n_discordant), (5, 1));
        assert!((r.rho - 4.0 / 6.0).abs() < 1e-15);
    }
}

#[test]
fn csv_loading() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(f, "x,z1,z2,y,split").unwrap();
    for i in 0..10 {
        writeln!(f, "{},{},{},{},train", i % 2, i, -i, i * 2).unwrap();
    }
    drop(f);
    let c = CString::new(path.to_str().unwrap()).unwrap();
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(cf_dataset_load_csv(c.as_ptr(), &mut ds), CfStatus::Ok);
        assert_eq!((cf_dataset_len(ds), cf_dataset_dim(ds)), (10, 2));
        cf_dataset_free(ds);
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/rankcf.h")).unwrap();
    let src = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 10);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    for ty in ["CfStatus", "CfKernel", "CfEstimate", "CfRankReport", "CfDataset", "CfEstimator"] {
        assert!(header.contains(&format!("typedef struct {ty}")) || header.contains(&format!("typedef enum {ty}")), "{ty}");
    }
    let v = unsafe { CStr::from_ptr(cf_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        "#include \"rankcf.h\"\nint main(void) { CfEstimate e; CfStatus s = CF_STATUS_OK; (void)e; return (int)s; }\n",
    )
    .unwrap();
    let inc = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new(cc).arg("-fsyntax-only").arg("-Wall").arg("-Werror").arg("-I").arg(inc).arg(&src).status().unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if Command::new(cc).arg("--version").output().is_ok() {
            return Ok(cc);
        }
    }
    Err(())
}
