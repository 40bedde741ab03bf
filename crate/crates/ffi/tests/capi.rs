use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shockmix_ffi::*;

const SMALL_SEDOV: &str = r#"
case = "sedov"
order = 2
dt = 5e-4
steps = 4
[mesh]
nx = 6
ny = 6
x_min = -1.0
x_max = 1.0
y_min = -1.0
y_max = 1.0
[sensor]
kind = "gmm"
clusters = 3
interval = 2
"#;

fn last_error() -> String {
    unsafe { CStr::from_ptr(gs_last_error()) }.to_string_lossy().into_owned()
}

fn new_solver(toml: &str) -> Result<*mut GsSolver, (GsStatus, String)> {
    let text = CString::new(toml).unwrap();
    let mut handle = ptr::null_mut();
    match unsafe { gs_solver_new(text.as_ptr(), &mut handle) } {
        GsStatus::Ok => Ok(handle),
        s => Err((s, last_error())),
    }
}

/// Two well separated blobs in the plane, `n` points each.
fn two_blobs(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::with_capacity(4 * n);
    for centre in [[0.0, 0.0], [5.0, 5.0]] {
        for _ in 0..n {
            pts.push(centre[0] + rng.gen_range(-0.5..0.5));
            pts.push(centre[1] + rng.gen_range(-0.5..0.5));
        }
    }
    pts
}

#[test]
fn solver_lifecycle() {
    let s = new_solver(SMALL_SEDOV).unwrap();
    unsafe {
        let mut n = 0usize;
        assert_eq!(gs_solver_num_nodes(s, &mut n), GsStatus::Ok);
        assert_eq!(n, 36 * 9);

        let mut before = vec![0.0; 4 * n];
        assert_eq!(gs_solver_field(s, before.as_mut_ptr(), before.len()), GsStatus::Ok);
        assert_eq!(gs_solver_advance(s, 3), GsStatus::Ok);
        assert_eq!(gs_solver_step(s, 2.5e-4), GsStatus::Ok);

        let (mut t, mut k) = (0.0, 0usize);
        assert_eq!(gs_solver_time(s, &mut t, &mut k), GsStatus::Ok);
        assert_eq!(k, 4);
        assert!((t - 1.75e-3).abs() < 1e-15);

        let mut after = vec![0.0; 4 * n];
        assert_eq!(gs_solver_field(s, after.as_mut_ptr(), after.len()), GsStatus::Ok);
        assert_ne!(before, after);
        assert!(after.iter().all(|v| v.is_finite()));

        let mut xy = vec![0.0; 2 * n];
        assert_eq!(gs_solver_coordinates(s, xy.as_mut_ptr(), xy.len()), GsStatus::Ok);
        assert!(xy.iter().all(|v| (-1.0..=1.0).contains(v)));

        let mut sensor = vec![-1.0; n];
        assert_eq!(gs_solver_sensor(s, sensor.as_mut_ptr(), n), GsStatus::Ok);
        assert!(sensor.iter().all(|v| (0.0..=1.0).contains(v)));

        let (mut rho, mut p) = (0.0, 0.0);
        assert_eq!(gs_solver_minima(s, &mut rho, &mut p), GsStatus::Ok);
        assert!(rho > 0.0 && p > 0.0);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snap.csv");
        let c_path = CString::new(path.to_str().unwrap()).unwrap();
        assert_eq!(gs_solver_write_snapshot(s, c_path.as_ptr()), GsStatus::Ok);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# shockmix snapshot v1"));

        gs_solver_free(s);
    }
}

#[test]
fn buffer_and_argument_errors() {
    let s = new_solver(SMALL_SEDOV).unwrap();
    unsafe {
        let mut small = vec![0.0; 3];
        assert_eq!(gs_solver_field(s, small.as_mut_ptr(), small.len()), GsStatus::BufferTooSmall);
        assert!(last_error().contains("needed"));
        assert_eq!(gs_solver_field(s, ptr::null_mut(), 1 << 20), GsStatus::NullPointer);
        assert_eq!(gs_solver_step(s, -1.0), GsStatus::InvalidArgument);
        assert_eq!(gs_solver_step(s, f64::NAN), GsStatus::InvalidArgument);
        let mut t = 0.0;
        assert_eq!(gs_solver_time(ptr::null_mut(), &mut t, ptr::null_mut()), GsStatus::NullPointer);
        assert_eq!(gs_solver_time(s, &mut t, ptr::null_mut()), GsStatus::NullPointer);
        gs_solver_free(s);
        gs_solver_free(ptr::null_mut());
        gs_mixture_free(ptr::null_mut());
    }
}

#[test]
fn config_errors_map_to_config_status() {
    let (status, msg) = new_solver("case = \"sedov\"\norder = 0\n").unwrap_err();
    assert_eq!(status, GsStatus::Config);
    assert!(!msg.is_empty());
    let (status, _) = new_solver("not toml [[").unwrap_err();
    assert_eq!(status, GsStatus::Config);
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { gs_solver_new(ptr::null(), &mut out) }, GsStatus::NullPointer);
}

#[test]
fn blowup_reports_numerical() {
    let s = new_solver(SMALL_SEDOV).unwrap();
    unsafe {
        let mut status = GsStatus::Ok;
        for _ in 0..20 {
            status = gs_solver_step(s, 0.5);
            if status != GsStatus::Ok {
                break;
            }
        }
        assert_eq!(status, GsStatus::Numerical, "{}", last_error());
        gs_solver_free(s);
    }
}

#[test]
fn mixture_recovers_two_blobs() {
    let pts = two_blobs(200, 7);
    let rows = pts.len() / 2;
    unsafe {
        let mut m = ptr::null_mut();
        let st = gs_mixture_fit(pts.as_ptr(), rows, 2, false, 2, 3, 200, 1e-8, 1e-10, &mut m);
        assert_eq!(st, GsStatus::Ok, "{}", last_error());

        let (mut k, mut dim, mut iters, mut logl) = (0usize, 0usize, 0usize, 0.0);
        assert_eq!(gs_mixture_info(m, &mut k, &mut dim, &mut iters, &mut logl), GsStatus::Ok);
        assert_eq!((k, dim), (2, 2));
        assert!(iters >= 1 && logl.is_finite());

        let mut total = 0.0;
        let mut means = Vec::new();
        for j in 0..2 {
            let (mut w, mut mean, mut cov) = (0.0, [0.0; 2], [0.0; 4]);
            assert_eq!(gs_mixture_component(m, j, &mut w, mean.as_mut_ptr(), cov.as_mut_ptr()), GsStatus::Ok);
            assert!((w - 0.5).abs() < 1e-9);
            // uniform on a unit square has variance 1/12
            assert!((cov[0] - 1.0 / 12.0).abs() < 0.02 && (cov[1] - cov[2]).abs() < 1e-15);
            total += w;
            means.push(mean);
        }
        assert!((total - 1.0).abs() < 1e-12);
        // sorted by distance to the origin
        assert!(means[0][0].abs() < 0.1 && (means[1][0] - 5.0).abs() < 0.1);

        let mut bad = (0.0, [0.0; 2], [0.0; 4]);
        assert_eq!(gs_mixture_component(m, 2, &mut bad.0, bad.1.as_mut_ptr(), bad.2.as_mut_ptr()), GsStatus::InvalidArgument);

        let (mut l, mut aic, mut bic) = (0.0, 0.0, 0.0);
        assert_eq!(gs_mixture_metrics(m, pts.as_ptr(), rows, 2, false, &mut l, &mut aic, &mut bic), GsStatus::Ok);
        let np = 11.0;
        assert!((aic - (2.0 * np - 2.0 * l)).abs() < 1e-9 * aic.abs());
        assert!((bic - (np * (rows as f64).ln() - 2.0 * l)).abs() < 1e-9 * bic.abs());

        let mut s = vec![0.5; rows];
        assert_eq!(gs_mixture_sensor(m, pts.as_ptr(), rows, 2, false, s.as_mut_ptr()), GsStatus::Ok);
        assert!(s[..200].iter().all(|&v| v == 0.0));
        assert!(s[200..].iter().all(|&v| v == 1.0));

        gs_mixture_free(m);
    }
}

#[test]
fn cluster_selection_prefers_two() {
    let pts = two_blobs(150, 11);
    let rows = pts.len() / 2;
    let mut bic = [0.0; 4];
    let mut best = 0usize;
    let st = unsafe {
        gs_select_clusters(pts.as_ptr(), rows, 2, true, 1, 4, 1, 300, 1e-8, 1e-10, bic.as_mut_ptr(), bic.len(), &mut best)
    };
    assert_eq!(st, GsStatus::Ok, "{}", last_error());
    assert!(bic[1] < bic[0]);
    assert_eq!(best, 2, "{bic:?}");

    let st = unsafe {
        gs_select_clusters(pts.as_ptr(), rows, 2, true, 3, 1, 1, 300, 1e-8, 1e-10, bic.as_mut_ptr(), bic.len(), &mut best)
    };
    assert_eq!(st, GsStatus::InvalidArgument);
    let st = unsafe {
        gs_select_clusters(pts.as_ptr(), rows, 2, true, 1, 6, 1, 300, 1e-8, 1e-10, bic.as_mut_ptr(), bic.len(), &mut best)
    };
    assert_eq!(st, GsStatus::BufferTooSmall);
}

#[test]
fn mixture_argument_errors() {
    let pts = two_blobs(10, 1);
    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(gs_mixture_fit(pts.as_ptr(), 20, 2, false, 0, 1, 10, 1e-8, 1e-8, &mut m), GsStatus::InvalidArgument);
        assert_eq!(gs_mixture_fit(pts.as_ptr(), 0, 2, false, 1, 1, 10, 1e-8, 1e-8, &mut m), GsStatus::InvalidArgument);
        assert_eq!(gs_mixture_fit(ptr::null(), 20, 2, false, 1, 1, 10, 1e-8, 1e-8, &mut m), GsStatus::NullPointer);
        assert_eq!(gs_mixture_fit(pts.as_ptr(), 20, 2, false, 1, 1, 10, -1.0, 1e-8, &mut m), GsStatus::InvalidArgument);
    }
    assert!(m.is_null());
}

#[test]
fn ramp_endpoints() {
    assert_eq!(gs_sensor_ramp(-10.0, -2.5, 1.0), 0.0);
    assert_eq!(gs_sensor_ramp(10.0, -2.5, 1.0), 1.0);
    assert!((gs_sensor_ramp(-2.5, -2.5, 1.0) - 0.5).abs() < 1e-15);
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/shockmix.h")).unwrap();
    for name in [
        "gs_last_error",
        "gs_sensor_ramp",
        "gs_solver_new",
        "gs_solver_free",
        "gs_solver_step",
        "gs_solver_advance",
        "gs_solver_time",
        "gs_solver_num_nodes",
        "gs_solver_field",
        "gs_solver_coordinates",
        "gs_solver_sensor",
        "gs_solver_minima",
        "gs_solver_write_snapshot",
        "gs_mixture_fit",
        "gs_mixture_free",
        "gs_mixture_info",
        "gs_mixture_component",
        "gs_mixture_metrics",
        "gs_mixture_sensor",
        "gs_select_clusters",
        "typedef struct GsSolver GsSolver",
        "typedef struct GsMixture GsMixture",
        "GS_STATUS_BUFFER_TOO_SMALL = 7",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}

/// Type-checks a small C client against the header when a C compiler is around.
#[test]
fn header_compiles_as_c() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("client.c");
    std::fs::write(
        &src,
        r#"#include "shockmix.h"
int run(const char *cfg) {
    GsSolver *s = NULL;
    size_t n = 0;
    if (gs_solver_new(cfg, &s) != GS_STATUS_OK) return 1;
    gs_solver_num_nodes(s, &n);
    double *q = malloc(4 * n * sizeof(double));
    GsStatus st = gs_solver_field(s, q, 4 * n);
    free(q);
    gs_solver_free(s);
    return st == GS_STATUS_OK ? 0 : (int)st;
}
"#,
    )
    .unwrap();
    let out = match Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .output()
    {
        Ok(o) => o,
        Err(_) => {
            eprintln!("no C compiler, skipping");
            return;
        }
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
