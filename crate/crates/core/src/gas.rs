//! Ideal-gas state algebra and fluxes for the 2D compressible equations.
//!
//! Conservative states are `[rho, rho*u, rho*v, rho*E]`. Block fluxes are
//! returned as `[flux_x, flux_y]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type State = [f64; 4];

/// Flux pair `[f_x, f_y]`.
pub type BlockFlux = [State; 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GasModel {
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_prandtl")]
    pub prandtl: f64,
    #[serde(default = "default_gas_constant")]
    pub gas_constant: f64,
}

fn default_gamma() -> f64 {
    1.4
}

fn default_prandtl() -> f64 {
    0.72
}

fn default_gas_constant() -> f64 {
    1.0
}

impl Default for GasModel {
    fn default() -> Self {
        GasModel {
            gamma: default_gamma(),
            prandtl: default_prandtl(),
            gas_constant: default_gas_constant(),
        }
    }
}

impl GasModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 1.0) || !(self.prandtl > 0.0) || !(self.gas_constant > 0.0) {
            return Err(Error::Config(format!(
                "gas model needs gamma > 1, Pr > 0, R > 0; got {self:?}"
            )));
        }
        Ok(())
    }

    /// `gamma / ((gamma - 1) Pr)`, the conductivity factor with `kappa = theta mu R`.
    pub fn theta(&self) -> f64 {
        self.gamma / ((self.gamma - 1.0) * self.prandtl)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub rho: f64,
    pub u: f64,
    pub v: f64,
    pub p: f64,
}

impl Primitive {
    pub fn new(rho: f64, u: f64, v: f64, p: f64) -> Self {
        Primitive { rho, u, v, p }
    }

    pub fn is_admissible(&self) -> bool {
        self.rho > 0.0 && self.p > 0.0 && self.rho.is_finite() && self.p.is_finite()
    }

    pub fn sound_speed(&self, gas: &GasModel) -> f64 {
        (gas.gamma * self.p / self.rho).sqrt()
    }

    pub fn temperature(&self, gas: &GasModel) -> f64 {
        self.p / (self.rho * gas.gas_constant)
    }
}

/// Converts to primitives. Non-positive density is an error; non-positive
/// pressure is returned as is so callers can decide (see [`admissible_primitive`]).
pub fn primitive_from_conservative(q: &State, gas: &GasModel) -> Result<Primitive> {
    let rho = q[0];
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(Error::NonAdmissible {
            density: rho,
            pressure: f64::NAN,
        });
    }
    let u = q[1] / rho;
    let v = q[2] / rho;
    let p = (gas.gamma - 1.0) * (q[3] - 0.5 * rho * (u * u + v * v));
    Ok(Primitive { rho, u, v, p })
}

/// Like [`primitive_from_conservative`] but also rejects `p <= 0` and non-finite values.
pub fn admissible_primitive(q: &State, gas: &GasModel) -> Result<Primitive> {
    let w = primitive_from_conservative(q, gas)?;
    if !w.is_admissible() || !w.u.is_finite() || !w.v.is_finite() {
        return Err(Error::NonAdmissible {
            density: w.rho,
            pressure: w.p,
        });
    }
    Ok(w)
}

pub fn conservative_from_primitive(w: &Primitive, gas: &GasModel) -> State {
    [
        w.rho,
        w.rho * w.u,
        w.rho * w.v,
        w.p / (gas.gamma - 1.0) + 0.5 * w.rho * (w.u * w.u + w.v * w.v),
    ]
}

pub fn pressure(q: &State, gas: &GasModel) -> f64 {
    (gas.gamma - 1.0) * (q[3] - 0.5 * (q[1] * q[1] + q[2] * q[2]) / q[0])
}

/// Physical entropy `s = ln p - gamma ln rho`.
pub fn specific_entropy(w: &Primitive, gas: &GasModel) -> f64 {
    w.p.ln() - gas.gamma * w.rho.ln()
}

/// Mathematical entropy `S = -rho s / (gamma - 1)`.
pub fn entropy(q: &State, gas: &GasModel) -> Result<f64> {
    let w = admissible_primitive(q, gas)?;
    Ok(-w.rho * specific_entropy(&w, gas) / (gas.gamma - 1.0))
}

/// Entropy flux potential `psi = rho (v . n)`.
pub fn entropy_potential(q: &State, normal: [f64; 2]) -> f64 {
    q[1] * normal[0] + q[2] * normal[1]
}

pub fn entropy_variables(q: &State, gas: &GasModel) -> Result<State> {
    let w = admissible_primitive(q, gas)?;
    Ok(entropy_variables_from_primitive(&w, gas))
}

pub fn entropy_variables_from_primitive(w: &Primitive, gas: &GasModel) -> State {
    let g = gas.gamma;
    let s = specific_entropy(w, gas);
    let b = w.rho / w.p;
    [
        (g - s) / (g - 1.0) - 0.5 * b * (w.u * w.u + w.v * w.v),
        b * w.u,
        b * w.v,
        -b,
    ]
}

/// Inverse of [`entropy_variables`].
pub fn conservative_from_entropy_variables(ent: &State, gas: &GasModel) -> State {
    let g = gas.gamma;
    let b = -ent[3];
    let u = ent[1] / b;
    let v = ent[2] / b;
    let s = g - (g - 1.0) * (ent[0] + 0.5 * b * (u * u + v * v));
    // p = rho / b and s = ln p - g ln rho  =>  (1 - g) ln rho = s + ln b
    let rho = ((s + b.ln()) / (1.0 - g)).exp();
    conservative_from_primitive(&Primitive::new(rho, u, v, rho / b), gas)
}

pub fn euler_flux(q: &State, normal: [f64; 2], gas: &GasModel) -> Result<State> {
    let w = admissible_primitive(q, gas)?;
    Ok(euler_flux_primitive(q, &w, normal))
}

fn euler_flux_primitive(q: &State, w: &Primitive, normal: [f64; 2]) -> State {
    let vn = w.u * normal[0] + w.v * normal[1];
    [
        q[0] * vn,
        q[1] * vn + w.p * normal[0],
        q[2] * vn + w.p * normal[1],
        (q[3] + w.p) * vn,
    ]
}

/// Largest signal speed `|v . n| + c`.
pub fn max_wave_speed(q: &State, normal: [f64; 2], gas: &GasModel) -> Result<f64> {
    let w = admissible_primitive(q, gas)?;
    Ok((w.u * normal[0] + w.v * normal[1]).abs() + w.sound_speed(gas))
}

pub fn log_mean(a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) || !a.is_finite() || !b.is_finite() {
        return Err(Error::NonPositiveMean(a, b));
    }
    Ok(log_mean_with_logs(a, b, a.ln(), b.ln()))
}

/// Logarithmic mean with precomputed `ln a` and `ln b`.
#[inline]
pub fn log_mean_with_logs(a: f64, b: f64, ln_a: f64, ln_b: f64) -> f64 {
    let f = (a - b) / (a + b);
    if f.abs() < 1e-4 {
        let u = f * f;
        0.5 * (a + b) / (1.0 + u * (1.0 / 3.0 + u * (1.0 / 5.0 + u / 7.0)))
    } else {
        (a - b) / (ln_a - ln_b)
    }
}

/// Per-node quantities reused by every two-point flux evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FluxAux {
    pub rho: f64,
    pub u: f64,
    pub v: f64,
    pub p: f64,
    pub beta: f64,
    pub ln_rho: f64,
    pub ln_beta: f64,
    pub vel2: f64,
}

impl FluxAux {
    pub fn new(q: &State, gas: &GasModel) -> Result<Self> {
        let w = admissible_primitive(q, gas)?;
        Ok(Self::from_primitive(&w))
    }

    pub fn from_primitive(w: &Primitive) -> Self {
        let beta = 0.5 * w.rho / w.p;
        FluxAux {
            rho: w.rho,
            u: w.u,
            v: w.v,
            p: w.p,
            beta,
            ln_rho: w.rho.ln(),
            ln_beta: beta.ln(),
            vel2: w.u * w.u + w.v * w.v,
        }
    }

    pub fn sound_speed(&self, gas: &GasModel) -> f64 {
        (gas.gamma * self.p / self.rho).sqrt()
    }
}

/// Kinetic-energy-preserving, entropy-conservative flux from precomputed node data.
#[inline]
pub fn ec_flux_aux(l: &FluxAux, r: &FluxAux, normal: [f64; 2], gamma: f64) -> State {
    let rho_ln = log_mean_with_logs(l.rho, r.rho, l.ln_rho, r.ln_rho);
    let beta_ln = log_mean_with_logs(l.beta, r.beta, l.ln_beta, r.ln_beta);
    let rho_avg = 0.5 * (l.rho + r.rho);
    let beta_avg = 0.5 * (l.beta + r.beta);
    let u = 0.5 * (l.u + r.u);
    let v = 0.5 * (l.v + r.v);
    let vel2 = 0.5 * (l.vel2 + r.vel2);
    let p_tilde = 0.5 * rho_avg / beta_avg;
    let vn = u * normal[0] + v * normal[1];
    let f_rho = rho_ln * vn;
    let f_mx = u * f_rho + p_tilde * normal[0];
    let f_my = v * f_rho + p_tilde * normal[1];
    let f_e = (0.5 / ((gamma - 1.0) * beta_ln) - 0.5 * vel2) * f_rho + u * f_mx + v * f_my;
    [f_rho, f_mx, f_my, f_e]
}

/// Specialization of [`ec_flux_aux`] for `normal = e_axis`.
#[inline]
pub fn ec_flux_axis(l: &FluxAux, r: &FluxAux, axis: usize, gamma: f64) -> State {
    if axis == 0 {
        ec_flux_aux(l, r, [1.0, 0.0], gamma)
    } else {
        ec_flux_aux(l, r, [0.0, 1.0], gamma)
    }
}

pub fn ec_two_point_flux(ql: &State, qr: &State, normal: [f64; 2], gas: &GasModel) -> Result<State> {
    let l = FluxAux::new(ql, gas)?;
    let r = FluxAux::new(qr, gas)?;
    Ok(ec_flux_aux(&l, &r, normal, gas.gamma))
}

/// Entropy-conservative flux with local Lax-Friedrichs dissipation.
#[inline]
pub fn es_flux_aux(
    ql: &State,
    qr: &State,
    l: &FluxAux,
    r: &FluxAux,
    normal: [f64; 2],
    gas: &GasModel,
) -> State {
    let mut f = ec_flux_aux(l, r, normal, gas.gamma);
    let lam_l = (l.u * normal[0] + l.v * normal[1]).abs() + l.sound_speed(gas);
    let lam_r = (r.u * normal[0] + r.v * normal[1]).abs() + r.sound_speed(gas);
    let lam = lam_l.max(lam_r);
    for k in 0..4 {
        f[k] -= 0.5 * lam * (qr[k] - ql[k]);
    }
    f
}

pub fn riemann_solver_es(ql: &State, qr: &State, normal: [f64; 2], gas: &GasModel) -> Result<State> {
    let l = FluxAux::new(ql, gas)?;
    let r = FluxAux::new(qr, gas)?;
    Ok(es_flux_aux(ql, qr, &l, &r, normal, gas))
}

/// Navier-Stokes flux from primitive gradients.
///
/// `grad_vel[i][j] = d v_i / d x_j`; returns `[f_x, f_y]` with the heat flux `kappa grad T`.
pub fn viscous_flux(
    w: &Primitive,
    grad_vel: [[f64; 2]; 2],
    grad_t: [f64; 2],
    mu: f64,
    gas: &GasModel,
) -> BlockFlux {
    let div = grad_vel[0][0] + grad_vel[1][1];
    let mut tau = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            tau[i][j] = mu * (grad_vel[i][j] + grad_vel[j][i]);
        }
        tau[i][i] -= mu * 2.0 / 3.0 * div;
    }
    let kappa = gas.theta() * mu * gas.gas_constant;
    let vel = [w.u, w.v];
    let mut out = [[0.0; 4]; 2];
    for d in 0..2 {
        out[d] = [
            0.0,
            tau[0][d],
            tau[1][d],
            vel[0] * tau[0][d] + vel[1] * tau[1][d] + kappa * grad_t[d],
        ];
    }
    out
}

/// Entropy-stable artificial flux with separate mass and momentum coefficients.
///
/// `grad_vel[i][j] = d v_i / d x_j`.
pub fn guermond_popov_flux(
    rho: f64,
    vel: [f64; 2],
    grad_rho: [f64; 2],
    grad_vel: [[f64; 2]; 2],
    grad_rhoei: [f64; 2],
    alpha: f64,
    mu: f64,
) -> BlockFlux {
    let half_v2 = 0.5 * (vel[0] * vel[0] + vel[1] * vel[1]);
    let mut sym = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            sym[i][j] = 0.5 * (grad_vel[i][j] + grad_vel[j][i]);
        }
    }
    let mut out = [[0.0; 4]; 2];
    for d in 0..2 {
        let g = grad_rho[d];
        out[d] = [
            alpha * g,
            alpha * g * vel[0] + mu * rho * sym[0][d],
            alpha * g * vel[1] + mu * rho * sym[1][d],
            alpha * (grad_rhoei[d] + half_v2 * g)
                + mu * rho * (vel[0] * sym[0][d] + vel[1] * sym[1][d]),
        ];
    }
    out
}

/// Sub-cell resolution `h = V^(1/d) / (P + 1)`.
pub fn subcell_resolution(volume: f64, dim: usize, order: usize) -> f64 {
    volume.powf(1.0 / dim as f64) / (order as f64 + 1.0)
}

/// `alpha_a = mu_a = mu0 h s`.
pub fn artificial_coefficients(s: f64, mu0: f64, volume: f64, dim: usize, order: usize) -> (f64, f64) {
    let c = mu0 * subcell_resolution(volume, dim, order) * s;
    (c, c)
}

/// Mirrors the normal momentum component.
pub fn slip_wall_state(q: &State, normal: [f64; 2]) -> State {
    let mn = q[1] * normal[0] + q[2] * normal[1];
    [
        q[0],
        q[1] - 2.0 * mn * normal[0],
        q[2] - 2.0 * mn * normal[1],
        q[3],
    ]
}

/// Characteristic outflow at exterior pressure `p0`.
///
/// Supersonic normal outflow copies the interior. Otherwise the exterior
/// density follows from the pressure ratio, its sound speed is closed with
/// `c0 = sqrt(gamma p0 / rho0)`, and the outgoing invariant fixes the normal velocity.
pub fn outflow_state(q: &State, normal: [f64; 2], p0: f64, gas: &GasModel) -> Result<State> {
    let w = admissible_primitive(q, gas)?;
    let g = gas.gamma;
    let c = w.sound_speed(gas);
    let vn = w.u * normal[0] + w.v * normal[1];
    if vn / c >= 1.0 {
        return Ok(*q);
    }
    let rho0 = w.rho * (1.0 + (p0 / w.p - 1.0) / g);
    if !(rho0 > 0.0) {
        return Err(Error::NonAdmissible {
            density: rho0,
            pressure: p0,
        });
    }
    let c0 = (g * p0 / rho0).sqrt();
    let r_plus = vn + 2.0 * c / (g - 1.0);
    let vn0 = r_plus - 2.0 * c0 / (g - 1.0);
    let vt = [w.u - vn * normal[0], w.v - vn * normal[1]];
    let u0 = vt[0] + vn0 * normal[0];
    let v0 = vt[1] + vn0 * normal[1];
    Ok(conservative_from_primitive(&Primitive::new(rho0, u0, v0, p0), gas))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const GAS: GasModel = GasModel {
        gamma: 1.4,
        prandtl: 0.72,
        gas_constant: 1.0,
    };

    fn state(rho: f64, u: f64, v: f64, p: f64) -> State {
        conservative_from_primitive(&Primitive::new(rho, u, v, p), &GAS)
    }

    fn dot(a: &State, b: &State) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn rest_state_pressure() {
        let w = primitive_from_conservative(&[1.0, 0.0, 0.0, 2.5], &GAS).unwrap();
        assert_abs_diff_eq!(w.p, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn reflection_states_energy() {
        let post = state(8.0, 7.145, -4.125, 116.5);
        let expected = 116.5 / 0.4 + 0.5 * 8.0 * (7.145f64.powi(2) + 4.125f64.powi(2));
        assert_abs_diff_eq!(post[3], expected, epsilon = 1e-12);
        assert_abs_diff_eq!(state(1.4, 0.0, 0.0, 1.0)[3], 2.5, epsilon = 1e-15);
    }

    #[test]
    fn non_positive_density_is_rejected() {
        assert!(matches!(
            primitive_from_conservative(&[-1.0, 0.0, 0.0, 1.0], &GAS),
            Err(Error::NonAdmissible { .. })
        ));
        let w = primitive_from_conservative(&[1.0, 2.0, 0.0, 1.0], &GAS).unwrap();
        assert!(w.p < 0.0 && !w.is_admissible());
        assert!(admissible_primitive(&[1.0, 2.0, 0.0, 1.0], &GAS).is_err());
    }

    #[test]
    fn entropy_variables_at_reference_state() {
        let w = entropy_variables(&state(1.0, 0.0, 0.0, 1.0), &GAS).unwrap();
        assert_abs_diff_eq!(w[0], 3.5, epsilon = 1e-14);
        assert_eq!(w[1], 0.0);
        assert_eq!(w[2], 0.0);
        assert_abs_diff_eq!(w[3], -1.0, epsilon = 1e-15);
    }

    #[test]
    fn stagnant_and_unit_fluxes() {
        let q = state(1.3, 0.0, 0.0, 0.7);
        let f = euler_flux(&q, [0.6, 0.8], &GAS).unwrap();
        assert_abs_diff_eq!(f[0], 0.0);
        assert_abs_diff_eq!(f[1], 0.7 * 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(f[2], 0.7 * 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(f[3], 0.0);

        let q = state(1.0, 1.0, 0.0, 1.0);
        let f = euler_flux(&q, [1.0, 0.0], &GAS).unwrap();
        assert_eq!(f[0], 1.0);
        assert_eq!(f[1], 2.0);
        assert_eq!(f[2], 0.0);
        assert_abs_diff_eq!(f[3], q[3] + 1.0, epsilon = 1e-15);
    }

    #[test]
    fn log_mean_examples() {
        assert_abs_diff_eq!(log_mean(2.5, 2.5).unwrap(), 2.5, epsilon = 1e-15);
        assert_abs_diff_eq!(
            log_mean(1.0, std::f64::consts::E).unwrap(),
            std::f64::consts::E - 1.0,
            epsilon = 1e-14
        );
        assert!(matches!(log_mean(0.0, 1.0), Err(Error::NonPositiveMean(..))));
        assert!(log_mean(1.0, -2.0).is_err());
    }

    #[test]
    fn log_mean_series_branch_is_continuous() {
        // Both sides of the branch switch; the log side loses digits to cancellation.
        for &rel in &[0.99e-4, 1.01e-4, 1e-6, 1e-9] {
            let a: f64 = 1.7;
            let b = a * (1.0 - rel) / (1.0 + rel);
            let exact = {
                // (a-b)/ln(a/b) with ln via atanh for stability
                let f = (a - b) / (a + b);
                (a - b) / (2.0 * f.atanh())
            };
            assert!((log_mean(a, b).unwrap() - exact).abs() < 1e-11 * exact);
        }
    }

    #[test]
    fn slip_wall_mirrors_normal_velocity() {
        let q = state(1.0, 1.0, 1.0, 1.0);
        let ext = slip_wall_state(&q, [0.0, 1.0]);
        let w = primitive_from_conservative(&ext, &GAS).unwrap();
        assert_abs_diff_eq!(w.u, 1.0);
        assert_abs_diff_eq!(w.v, -1.0);
        assert_abs_diff_eq!(w.p, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn supersonic_outflow_copies_interior() {
        let c = (1.4f64 * 1.0 / 1.0).sqrt();
        let q = state(1.0, 3.0 * c, 0.2, 1.0);
        assert_eq!(outflow_state(&q, [1.0, 0.0], 0.5, &GAS).unwrap(), q);
    }

    #[test]
    fn subsonic_outflow_at_matching_pressure_is_transparent() {
        let q = state(1.2, 0.3, -0.1, 0.9);
        let ext = outflow_state(&q, [1.0, 0.0], 0.9, &GAS).unwrap();
        for k in 0..4 {
            assert_abs_diff_eq!(ext[k], q[k], epsilon = 1e-14);
        }
        let ext = outflow_state(&q, [1.0, 0.0], 1.1, &GAS).unwrap();
        let w = primitive_from_conservative(&ext, &GAS).unwrap();
        assert_abs_diff_eq!(w.p, 1.1, epsilon = 1e-13);
        assert_abs_diff_eq!(w.v, -0.1, epsilon = 1e-14);
        let c0 = (1.4 * 1.1 / w.rho).sqrt();
        let c = (1.4f64 * 0.9 / 1.2).sqrt();
        assert_abs_diff_eq!(w.u + 5.0 * c0, 0.3 + 5.0 * c, epsilon = 1e-13);
    }

    #[test]
    fn shear_and_heat_fluxes() {
        let w = Primitive::new(1.0, 0.0, 0.0, 1.0);
        let f = viscous_flux(&w, [[0.0, 1.0], [0.0, 0.0]], [0.0, 0.0], 1.0, &GAS);
        assert_eq!(f[0][1], 0.0); // tau_11
        assert_eq!(f[1][1], 1.0); // tau_12
        assert_eq!(f[0][2], 1.0); // tau_21
        assert_eq!(f[1][2], 0.0); // tau_22

        let f = viscous_flux(&w, [[0.0; 2]; 2], [2.0, 0.0], 1.0, &GAS);
        let kappa = 1.4 / (0.4 * 0.72);
        assert_abs_diff_eq!(f[0][3], kappa * 2.0, epsilon = 1e-14);
        assert_eq!(f[1][3], 0.0);
    }

    #[test]
    fn artificial_flux_examples() {
        let zero = guermond_popov_flux(1.0, [1.0, 2.0], [0.0; 2], [[0.0; 2]; 2], [0.0; 2], 1.0, 1.0);
        assert_eq!(zero, [[0.0; 4]; 2]);

        let f = guermond_popov_flux(1.0, [0.0, 0.0], [1.0, 0.0], [[0.0; 2]; 2], [0.0; 2], 1.0, 0.0);
        assert_eq!([f[0][0], f[1][0]], [1.0, 0.0]);
        assert_eq!([f[0][3], f[1][3]], [0.0, 0.0]);

        let f = guermond_popov_flux(1.0, [1.0, 0.0], [0.0; 2], [[0.0, 1.0], [0.0, 0.0]], [0.0; 2], 0.0, 1.0);
        assert_eq!([f[0][1], f[1][1], f[0][2], f[1][2]], [0.0, 0.5, 0.5, 0.0]);
        assert_eq!([f[0][3], f[1][3]], [0.0, 0.5]);
    }

    #[test]
    fn artificial_coefficient_scaling() {
        assert_eq!(artificial_coefficients(0.0, 0.1, 4.0, 2, 4), (0.0, 0.0));
        assert_abs_diff_eq!(subcell_resolution(4.0, 2, 4), 0.4, epsilon = 1e-15);
        let (a, m) = artificial_coefficients(0.5, 0.1, 4.0, 2, 4);
        assert_abs_diff_eq!(a, 0.02, epsilon = 1e-15);
        assert_eq!(a, m);
    }

    fn admissible() -> impl Strategy<Value = State> {
        (0.05f64..10.0, -5.0f64..5.0, -5.0f64..5.0, 0.05f64..20.0)
            .prop_map(|(r, u, v, p)| state(r, u, v, p))
    }

    fn unit_normal() -> impl Strategy<Value = [f64; 2]> {
        (0.0f64..std::f64::consts::TAU).prop_map(|t| [t.cos(), t.sin()])
    }

    proptest! {
        #[test]
        fn primitive_round_trip(q in admissible()) {
            let w = primitive_from_conservative(&q, &GAS).unwrap();
            let back = conservative_from_primitive(&w, &GAS);
            for k in 0..4 {
                prop_assert!((back[k] - q[k]).abs() <= 1e-14 * q[k].abs().max(1.0));
            }
        }

        #[test]
        fn entropy_variable_round_trip(q in admissible()) {
            let w = entropy_variables(&q, &GAS).unwrap();
            prop_assert!(w[3] < 0.0);
            let back = conservative_from_entropy_variables(&w, &GAS);
            for k in 0..4 {
                prop_assert!((back[k] - q[k]).abs() <= 1e-11 * q[k].abs().max(1.0));
            }
        }

        #[test]
        fn log_mean_between_min_and_mean(a in 1e-3f64..1e3, b in 1e-3f64..1e3) {
            let m = log_mean(a, b).unwrap();
            prop_assert!(m >= a.min(b) * (1.0 - 1e-15));
            prop_assert!(m <= 0.5 * (a + b) * (1.0 + 1e-15));
        }

        #[test]
        fn rotational_consistency(q in admissible(), n in unit_normal()) {
            let rotated = [q[0], q[1] * n[0] + q[2] * n[1], -q[1] * n[1] + q[2] * n[0], q[3]];
            let fx = euler_flux(&rotated, [1.0, 0.0], &GAS).unwrap();
            let back = [fx[0], fx[1] * n[0] - fx[2] * n[1], fx[1] * n[1] + fx[2] * n[0], fx[3]];
            let f = euler_flux(&q, n, &GAS).unwrap();
            for k in 0..4 {
                prop_assert!((f[k] - back[k]).abs() <= 1e-12 * (1.0 + f[k].abs()));
            }
        }

        #[test]
        fn ec_flux_contracts(ql in admissible(), qr in admissible(), n in unit_normal()) {
            let f = ec_two_point_flux(&ql, &qr, n, &GAS).unwrap();
            let g = ec_two_point_flux(&qr, &ql, n, &GAS).unwrap();
            let wl = entropy_variables(&ql, &GAS).unwrap();
            let wr = entropy_variables(&qr, &GAS).unwrap();
            let dw = [wr[0] - wl[0], wr[1] - wl[1], wr[2] - wl[2], wr[3] - wl[3]];
            let dpsi = entropy_potential(&qr, n) - entropy_potential(&ql, n);
            let scale = 1.0 + dw.iter().zip(&f).map(|(a, b)| (a * b).abs()).sum::<f64>();
            prop_assert!((dot(&dw, &f) - dpsi).abs() <= 1e-10 * scale);
            for k in 0..4 {
                prop_assert!((f[k] - g[k]).abs() <= 1e-13 * (1.0 + f[k].abs()));
            }
            let fc = ec_two_point_flux(&ql, &ql, n, &GAS).unwrap();
            let fe = euler_flux(&ql, n, &GAS).unwrap();
            for k in 0..4 {
                prop_assert!((fc[k] - fe[k]).abs() <= 1e-13 * (1.0 + fe[k].abs()));
            }
        }

        #[test]
        fn es_flux_produces_entropy(ql in admissible(), qr in admissible(), n in unit_normal()) {
            let f = riemann_solver_es(&ql, &qr, n, &GAS).unwrap();
            let wl = entropy_variables(&ql, &GAS).unwrap();
            let wr = entropy_variables(&qr, &GAS).unwrap();
            let dw = [wr[0] - wl[0], wr[1] - wl[1], wr[2] - wl[2], wr[3] - wl[3]];
            let dpsi = entropy_potential(&qr, n) - entropy_potential(&ql, n);
            prop_assert!(dot(&dw, &f) - dpsi <= 1e-12 * (1.0 + dpsi.abs()));
        }

        #[test]
        fn artificial_flux_is_linear(
            rho in 0.1f64..5.0, u in -2.0f64..2.0, v in -2.0f64..2.0,
            g1 in proptest::array::uniform2(-3.0f64..3.0),
            g2 in proptest::array::uniform2(-3.0f64..3.0),
            gv in proptest::array::uniform4(-3.0f64..3.0),
            a in 0.0f64..1.0, m in 0.0f64..1.0, scale in 0.0f64..4.0,
        ) {
            let gv = [[gv[0], gv[1]], [gv[2], gv[3]]];
            let base = guermond_popov_flux(rho, [u, v], g1, gv, g2, a, m);
            let doubled = guermond_popov_flux(rho, [u, v], g1, gv, g2, scale * a, scale * m);
            let a_only = guermond_popov_flux(rho, [u, v], g1, gv, g2, a, 0.0);
            let m_only = guermond_popov_flux(rho, [u, v], g1, gv, g2, 0.0, m);
            for d in 0..2 {
                for k in 0..4 {
                    prop_assert!((doubled[d][k] - scale * base[d][k]).abs() <= 1e-12 * (1.0 + base[d][k].abs()) * (1.0 + scale));
                    prop_assert!((a_only[d][k] + m_only[d][k] - base[d][k]).abs() <= 1e-12 * (1.0 + base[d][k].abs()));
                }
            }
        }
    }

    #[test]
    fn entropy_variables_match_finite_differences() {
        let h = 1e-7;
        for q in [state(1.0, 0.3, -0.2, 1.0), state(0.4, 2.0, 1.0, 0.2), state(5.0, -1.0, 0.5, 9.0)] {
            let w = entropy_variables(&q, &GAS).unwrap();
            for k in 0..4 {
                let mut qp = q;
                let mut qm = q;
                qp[k] += h;
                qm[k] -= h;
                let fd = (entropy(&qp, &GAS).unwrap() - entropy(&qm, &GAS).unwrap()) / (2.0 * h);
                assert!((fd - w[k]).abs() < 1e-6, "component {k}: {fd} vs {}", w[k]);
            }
        }
    }
}
