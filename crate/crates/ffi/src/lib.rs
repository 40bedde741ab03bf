//! C interface to the solver and the mixture-model tools.
//!
//! Every fallible call returns a [`GsStatus`]. On failure the message is kept
//! per thread until the next failing call and read with [`gs_last_error`].
//! Panics are caught here and reported as `GS_STATUS_PANIC`.
//!
//! Handles are opaque; free them with the matching `*_free` function.
//! Point matrices are row-major `rows x cols` arrays of doubles.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use shockmix::clustering::{fit_from_scratch, model_selection_metrics, FeatureMatrix, GaussianMixture};
use shockmix::sensors::{classify, scale_sensor};
use shockmix::{CaseConfig, Error, Solver};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Numerical = 4,
    Clustering = 5,
    Io = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Solver state for one case.
pub struct GsSolver {
    solver: Solver,
}

/// Fitted Gaussian mixture, components sorted by centroid distance to the origin.
pub struct GsMixture {
    mixture: GaussianMixture,
    log_likelihood: f64,
    iterations: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(GsStatus, String);

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        let status = match &err {
            Error::Config(_) | Error::InvalidOrder(_) | Error::InvalidMesh(_) => GsStatus::Config,
            Error::Numerical { .. } | Error::NonAdmissible { .. } | Error::NonPositiveMean(..) => GsStatus::Numerical,
            Error::Clustering(_) => GsStatus::Clustering,
            Error::Snapshot(_) | Error::Io(_) => GsStatus::Io,
            Error::Layout(_) => GsStatus::InvalidArgument,
        };
        Failure(status, err.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(GsStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GsStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            GsStatus::Panic
        }
    }
}

unsafe fn handle<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure(GsStatus::NullPointer, format!("{what} is null")))
}

unsafe fn put<T>(p: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        return Err(Failure(GsStatus::NullPointer, format!("{what} is null")));
    }
    p.write(value);
    Ok(())
}

unsafe fn input<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure(GsStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn output<'a>(p: *mut f64, len: usize, need: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if len < need {
        return Err(Failure(GsStatus::BufferTooSmall, format!("{what} holds {len} values, {need} needed")));
    }
    if need == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure(GsStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(GsStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn points(data: *const f64, rows: usize, cols: usize, normalize: bool) -> Result<FeatureMatrix, Failure> {
    if rows == 0 || cols == 0 {
        return Err(invalid("point matrix is empty"));
    }
    let n = rows.checked_mul(cols).ok_or_else(|| invalid("point matrix too large"))?;
    let raw = input(data, n, "points")?.to_vec();
    Ok(if normalize { FeatureMatrix::normalized(cols, raw)? } else { FeatureMatrix::new(cols, raw)? })
}

/// Message of the last failing call on this thread; empty if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn gs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Smooth sensor ramp: 0 below `s0 - ds`, 1 above `s0 + ds`.
#[no_mangle]
pub extern "C" fn gs_sensor_ramp(raw: f64, s0: f64, ds: f64) -> f64 {
    scale_sensor(raw, s0, ds)
}

/// Builds a solver from a TOML case description.
///
/// # Safety
/// `config_toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gs_solver_new(config_toml: *const c_char, out: *mut *mut GsSolver) -> GsStatus {
    guard(|| {
        let cfg = CaseConfig::from_toml(text(config_toml, "config")?)?;
        let solver = Solver::new(cfg)?;
        put(out, Box::into_raw(Box::new(GsSolver { solver })), "out")
    })
}

/// # Safety
/// `solver` must come from [`gs_solver_new`] and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn gs_solver_free(solver: *mut GsSolver) {
    if !solver.is_null() {
        drop(Box::from_raw(solver));
    }
}

/// One step of length `dt`.
///
/// # Safety
/// `solver` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gs_solver_step(solver: *mut GsSolver, dt: f64) -> GsStatus {
    guard(|| {
        let s = handle(solver, "solver")?;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(invalid(format!("time step {dt} must be positive")));
        }
        Ok(s.solver.step(dt)?)
    })
}

/// `steps` steps of the configured length.
///
/// # Safety
/// `solver` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gs_solver_advance(solver: *mut GsSolver, steps: usize) -> GsStatus {
    guard(|| {
        let s = handle(solver, "solver")?;
        let dt = s.solver.config().dt;
        for _ in 0..steps {
            s.solver.step(dt)?;
        }
        Ok(())
    })
}

/// # Safety
/// `solver` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn gs_solver_time(solver: *mut GsSolver, time: *mut f64, step: *mut usize) -> GsStatus {
    guard(|| {
        let s = handle(solver, "solver")?;
        put(time, s.solver.time(), "time")?;
        put(step, s.solver.step_index(), "step")
    })
}

/// Number of solution nodes; field buffers hold 4 values per node, coordinates 2.
///
/// # Safety
/// `solver` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gs_solver_num_nodes(solver: *mut GsSolver, out: *mut usize) -> GsStatus {
    guard(|| {
        let s = handle(solver, "solver")?;
        put(out, s.solver.discretization().num_nodes(), "out")
    })
}

/// Conservative state `(rho, rho u, rho v, rho E)` of every node, element-major.
///
/// # Safety
/// `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gs_solver_field(solver: *mut GsSolver, buf: *mut f64, len: usize) -> GsStatus {
    guard(|| {
        let s = handle(solver, "solver")?;
        let src = s.solver.field().as_flat();
        output(buf, len, src.len(), "buffer")?.copy_from_slice(src);
        Ok(())
    })
}

/// `(x, y)` of every node, in field order.
///
/// # Safety
/// `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gs_solver_coordinates(solver: *mut GsSolver, buf: *mut f64, len: usize) -> GsStatus {
    guard(|| {
        let s = handle(solver, "solver")?;
        let coords = s.solver.discretization().coordinates();
        let dst = output(buf, len, 2 * coords.len(), "buffer")?;
        for (d, c) in dst.chunks_exact_mut(2).zip(coords) {
            d.copy_from_slice(c);
        }
        Ok(())
    })
}

/// Nodal shock sensor in `[0, 1]` used for the latest step.
///
/// # Safety
/// `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gs_solver_sensor(solver: *mut GsSolver, buf: *mut f64, len: usize) -> GsStatus {
    guard(|| {
        let s = handle(solver, "solver")?;
        let nodal = &s.solver.sensor().nodal;
        output(buf, len, nodal.len(), "buffer")?.copy_from_slice(nodal);
        Ok(())
    })
}

/// Smallest density and pressure seen over all steps so far.
///
/// # Safety
/// `solver` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn gs_solver_minima(solver: *mut GsSolver, rho: *mut f64, p: *mut f64) -> GsStatus {
    guard(|| {
        let s = handle(solver, "solver")?;
        let (r, pr) = s.solver.minima();
        put(rho, r, "rho")?;
        put(p, pr, "p")
    })
}

/// Writes the current state as a snapshot file.
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gs_solver_write_snapshot(solver: *mut GsSolver, path: *const c_char) -> GsStatus {
    guard(|| {
        let s = handle(solver, "solver")?;
        let path = text(path, "path")?;
        Ok(s.solver.snapshot()?.write(Path::new(path))?)
    })
}

/// Cold-start fit (k-means, then EM) of `k` components. With `normalize`
/// each column is min-max scaled to `[0, 1]` first.
///
/// # Safety
/// `data` must hold `rows * cols` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gs_mixture_fit(
    data: *const f64,
    rows: usize,
    cols: usize,
    normalize: bool,
    k: usize,
    seed: u64,
    max_iters: usize,
    epsilon: f64,
    tolerance: f64,
    out: *mut *mut GsMixture,
) -> GsStatus {
    guard(|| {
        if k == 0 {
            return Err(invalid("need at least one component"));
        }
        if !(epsilon > 0.0 && tolerance > 0.0) {
            return Err(invalid("epsilon and tolerance must be positive"));
        }
        let pts = points(data, rows, cols, normalize)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mixture, diag) = fit_from_scratch(&pts, k, max_iters, epsilon, tolerance, &mut rng)?;
        let fitted = GsMixture {
            mixture: mixture.sorted_by_origin_distance(),
            log_likelihood: diag.log_likelihood,
            iterations: diag.iterations,
        };
        put(out, Box::into_raw(Box::new(fitted)), "out")
    })
}

/// # Safety
/// `mixture` must come from [`gs_mixture_fit`] and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn gs_mixture_free(mixture: *mut GsMixture) {
    if !mixture.is_null() {
        drop(Box::from_raw(mixture));
    }
}

/// Surviving component count (deletion can leave fewer than requested),
/// feature dimension, EM iterations and final log-likelihood.
///
/// # Safety
/// `mixture` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn gs_mixture_info(
    mixture: *mut GsMixture,
    components: *mut usize,
    dim: *mut usize,
    iterations: *mut usize,
    log_likelihood: *mut f64,
) -> GsStatus {
    guard(|| {
        let m = handle(mixture, "mixture")?;
        put(components, m.mixture.len(), "components")?;
        put(dim, m.mixture.dim(), "dim")?;
        put(iterations, m.iterations, "iterations")?;
        put(log_likelihood, m.log_likelihood, "log_likelihood")
    })
}

/// Weight, mean (`dim` values) and row-major covariance (`dim * dim`) of component `j`.
///
/// # Safety
/// `mean` and `cov` must hold `dim` and `dim * dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn gs_mixture_component(
    mixture: *mut GsMixture,
    j: usize,
    weight: *mut f64,
    mean: *mut f64,
    cov: *mut f64,
) -> GsStatus {
    guard(|| {
        let m = handle(mixture, "mixture")?;
        let g = m
            .mixture
            .components
            .get(j)
            .ok_or_else(|| invalid(format!("component {j} of {}", m.mixture.len())))?;
        let v = m.mixture.dim();
        put(weight, g.weight, "weight")?;
        output(mean, v, v, "mean")?.copy_from_slice(&g.mean);
        output(cov, v * v, v * v, "cov")?.copy_from_slice(&g.cov);
        Ok(())
    })
}

/// Log-likelihood, AIC and BIC of the mixture on a point set.
///
/// # Safety
/// `data` must hold `rows * cols` doubles; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn gs_mixture_metrics(
    mixture: *mut GsMixture,
    data: *const f64,
    rows: usize,
    cols: usize,
    normalize: bool,
    log_likelihood: *mut f64,
    aic: *mut f64,
    bic: *mut f64,
) -> GsStatus {
    guard(|| {
        let m = handle(mixture, "mixture")?;
        let pts = points(data, rows, cols, normalize)?;
        let ms = model_selection_metrics(&pts, &m.mixture)?;
        put(log_likelihood, ms.log_likelihood, "log_likelihood")?;
        put(aic, ms.aic, "aic")?;
        put(bic, ms.bic, "bic")
    })
}

/// Per-point sensor value: rank of the most responsible component over `K - 1`.
///
/// # Safety
/// `data` must hold `rows * cols` doubles and `out` `rows` doubles.
#[no_mangle]
pub unsafe extern "C" fn gs_mixture_sensor(
    mixture: *mut GsMixture,
    data: *const f64,
    rows: usize,
    cols: usize,
    normalize: bool,
    out: *mut f64,
) -> GsStatus {
    guard(|| {
        let m = handle(mixture, "mixture")?;
        let pts = points(data, rows, cols, normalize)?;
        let s = classify(&pts, &m.mixture)?;
        output(out, rows, rows, "out")?.copy_from_slice(&s);
        Ok(())
    })
}

/// Fits every `K` in `k_min..=k_max` and writes the BIC values to `bic`
/// (`k_max - k_min + 1` entries) and the minimizing `K` to `best_k`.
///
/// # Safety
/// `data` must hold `rows * cols` doubles and `bic` `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gs_select_clusters(
    data: *const f64,
    rows: usize,
    cols: usize,
    normalize: bool,
    k_min: usize,
    k_max: usize,
    seed: u64,
    max_iters: usize,
    epsilon: f64,
    tolerance: f64,
    bic: *mut f64,
    len: usize,
    best_k: *mut usize,
) -> GsStatus {
    guard(|| {
        if k_min == 0 || k_min > k_max {
            return Err(invalid(format!("bad cluster range {k_min}..={k_max}")));
        }
        if !(epsilon > 0.0 && tolerance > 0.0) {
            return Err(invalid("epsilon and tolerance must be positive"));
        }
        let pts = points(data, rows, cols, normalize)?;
        let dst = output(bic, len, k_max - k_min + 1, "bic")?;
        let mut best = (f64::INFINITY, k_min);
        for (slot, k) in dst.iter_mut().zip(k_min..=k_max) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mix, _) = fit_from_scratch(&pts, k, max_iters, epsilon, tolerance, &mut rng)?;
            *slot = model_selection_metrics(&pts, &mix)?.bic;
            if *slot < best.0 {
                best = (*slot, k);
            }
        }
        put(best_k, best.1, "best_k")
    })
}
