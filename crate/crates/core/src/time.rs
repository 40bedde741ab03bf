//! Explicit SSP Runge-Kutta stepping, positivity limiting and CFL estimates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gas::{pressure, subcell_resolution, GasModel, State};
use crate::spatial::{ConservativeField, Discretization};

/// Pressure-pass bisection stops once the bracket is this narrow.
const BISECTION_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimiterConfig {
    /// Admissibility floor parameter; floors are `min(mean, epsilon)`.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    1e-13
}

impl Default for LimiterConfig {
    fn default() -> Self {
        LimiterConfig { epsilon: default_epsilon() }
    }
}

impl LimiterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("limiter.epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Three-stage Shu-Osher SSPRK step on a flat state vector.
///
/// `rhs(u, t, out)` writes `L(u)` into `out`; `post_stage` runs after every stage.
pub fn ssprk33_step<R, P>(u: &mut [f64], t: f64, dt: f64, mut rhs: R, mut post_stage: P) -> Result<()>
where
    R: FnMut(&[f64], f64, &mut [f64]) -> Result<()>,
    P: FnMut(&mut [f64], f64) -> Result<()>,
{
    let n = u.len();
    let mut k = vec![0.0; n];
    let mut stage = vec![0.0; n];

    rhs(u, t, &mut k)?;
    stage
        .par_iter_mut()
        .zip(u.par_iter().zip(k.par_iter()))
        .for_each(|(s, (&u0, &l))| *s = u0 + dt * l);
    post_stage(&mut stage, t + dt)?;

    rhs(&stage, t + dt, &mut k)?;
    stage
        .par_iter_mut()
        .zip(u.par_iter().zip(k.par_iter()))
        .for_each(|(s, (&u0, &l))| *s = 0.75 * u0 + 0.25 * (*s + dt * l));
    post_stage(&mut stage, t + 0.5 * dt)?;

    rhs(&stage, t + 0.5 * dt, &mut k)?;
    u.par_iter_mut()
        .zip(stage.par_iter().zip(k.par_iter()))
        .for_each(|(u0, (&s, &l))| *u0 = *u0 / 3.0 + 2.0 / 3.0 * (s + dt * l));
    post_stage(u, t + dt)?;
    Ok(())
}

/// Quadrature-weighted element mean.
pub fn element_mean(element: &[State], weights: &[f64]) -> State {
    let n = weights.len();
    let mut mean = [0.0; 4];
    let mut total = 0.0;
    for (k, q) in element.iter().enumerate() {
        let w = weights[k % n] * weights[k / n];
        total += w;
        for c in 0..4 {
            mean[c] += w * q[c];
        }
    }
    mean.map(|m| m / total)
}

/// Zhang-Shu rescaling of one element toward its mean so that density and
/// pressure stay above `min(mean, epsilon)`. Returns whether anything changed.
pub fn positivity_limit(element: &mut [State], weights: &[f64], limiter: &LimiterConfig, gas: &GasModel) -> Result<bool> {
    let mean = element_mean(element, weights);
    let p_mean = pressure(&mean, gas);
    if !(mean[0] > 0.0) || !(p_mean > 0.0) {
        return Err(Error::Numerical {
            element: 0,
            time: 0.0,
            reason: format!("element mean is not admissible (density {:e}, pressure {p_mean:e})", mean[0]),
        });
    }
    let mut changed = false;

    let rho_floor = mean[0].min(limiter.epsilon);
    let rho_min = element.iter().map(|q| q[0]).fold(f64::INFINITY, f64::min);
    if rho_min < rho_floor {
        let theta = ((mean[0] - rho_floor) / (mean[0] - rho_min)).clamp(0.0, 1.0);
        for q in element.iter_mut() {
            q[0] = mean[0] + theta * (q[0] - mean[0]);
        }
        changed = true;
    }

    let p_floor = p_mean.min(limiter.epsilon);
    let mut theta = 1.0f64;
    for q in element.iter() {
        if pressure(q, gas) >= p_floor {
            continue;
        }
        let at = |s: f64| -> State { std::array::from_fn(|c| mean[c] + s * (q[c] - mean[c])) };
        // p along the segment is concave, p(0) >= floor > p(1): bisect the crossing.
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        while hi - lo > BISECTION_TOL {
            let mid = 0.5 * (lo + hi);
            if pressure(&at(mid), gas) >= p_floor {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        theta = theta.min(lo);
    }
    if theta < 1.0 {
        for q in element.iter_mut() {
            for c in 0..4 {
                q[c] = mean[c] + theta * (q[c] - mean[c]);
            }
        }
        changed = true;
    }
    Ok(changed)
}

/// Limits every element; returns the number of elements that were modified.
pub fn limit_field(disc: &Discretization, field: &mut ConservativeField, limiter: &LimiterConfig, t: f64) -> Result<usize> {
    limit_states(disc, field.nodes_mut(), limiter, t)
}

/// [`limit_field`] on a bare element-major node array.
pub fn limit_states(disc: &Discretization, states: &mut [State], limiter: &LimiterConfig, t: f64) -> Result<usize> {
    let npe = disc.nodes_per_element();
    let weights = disc.ops().weights();
    let gas = disc.gas();
    states
        .par_chunks_mut(npe)
        .enumerate()
        .map(|(e, el)| {
            positivity_limit(el, weights, limiter, gas)
                .map(usize::from)
                .map_err(|err| match err {
                    Error::Numerical { reason, .. } => Error::Numerical { element: e, time: t, reason },
                    other => other.at_element(e, t),
                })
        })
        .try_reduce(|| 0, |a, b| Ok::<_, Error>(a + b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CflReport {
    pub inviscid: f64,
    pub viscous: f64,
}

/// `CFL_i = dt max(|v| + c) / h`, `CFL_v = dt max(mu / rho) / h^2` with
/// `h = V^(1/d) / (P + 1)`. `mu_total` is per element; empty means the
/// physical viscosity alone.
pub fn cfl_report(disc: &Discretization, field: &ConservativeField, dt: f64, mu_total: &[f64]) -> Result<CflReport> {
    let gas = disc.gas();
    let h = subcell_resolution(disc.mesh().volume(), 2, disc.ops().order());
    let npe = disc.nodes_per_element();
    if !mu_total.is_empty() && mu_total.len() != field.num_elements() {
        return Err(Error::Layout(format!(
            "{} viscosity values for {} elements",
            mu_total.len(),
            field.num_elements()
        )));
    }
    let (wave, diff) = field
        .nodes()
        .par_chunks(npe)
        .enumerate()
        .map(|(e, el)| {
            let mu = disc.viscosity() + mu_total.get(e).copied().unwrap_or(0.0);
            let mut wave = 0.0f64;
            let mut diff = 0.0f64;
            for q in el {
                let w = crate::gas::admissible_primitive(q, gas).map_err(|err| err.at_element(e, 0.0))?;
                wave = wave.max((w.u * w.u + w.v * w.v).sqrt() + w.sound_speed(gas));
                diff = diff.max(mu / w.rho);
            }
            Ok((wave, diff))
        })
        .try_reduce(|| (0.0, 0.0), |a, b| Ok::<_, Error>((a.0.max(b.0), a.1.max(b.1))))?;
    Ok(CflReport {
        inviscid: dt * wave / h,
        viscous: dt * diff / (h * h),
    })
}
