//! Exact solution of the 1D Riemann problem for an ideal gas.

use crate::error::{Error, Result};

/// `(rho, u, p)` state of a 1D problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Riemann1d {
    pub rho: f64,
    pub u: f64,
    pub p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactRiemann {
    left: Riemann1d,
    right: Riemann1d,
    gamma: f64,
    pub p_star: f64,
    pub u_star: f64,
}

impl ExactRiemann {
    /// Solves for the star region by Newton iteration on the pressure function.
    pub fn new(left: Riemann1d, right: Riemann1d, gamma: f64) -> Result<Self> {
        for s in [left, right] {
            if !(s.rho > 0.0 && s.p > 0.0) {
                return Err(Error::NonAdmissible { density: s.rho, pressure: s.p });
            }
        }
        let cl = (gamma * left.p / left.rho).sqrt();
        let cr = (gamma * right.p / right.rho).sqrt();
        let du = right.u - left.u;
        if 2.0 * (cl + cr) / (gamma - 1.0) <= du {
            return Err(Error::Config("Riemann data generates vacuum".into()));
        }
        // Two-rarefaction guess.
        let z = (gamma - 1.0) / (2.0 * gamma);
        let mut p = ((cl + cr - 0.5 * (gamma - 1.0) * du) / (cl / left.p.powf(z) + cr / right.p.powf(z))).powf(1.0 / z);
        p = p.max(1e-12);
        for _ in 0..100 {
            let (fl, dl) = wave_function(p, left, gamma);
            let (fr, dr) = wave_function(p, right, gamma);
            let next = (p - (fl + fr + du) / (dl + dr)).max(1e-14);
            let change = 2.0 * (next - p).abs() / (next + p);
            p = next;
            if change < 1e-15 {
                break;
            }
        }
        let (fl, _) = wave_function(p, left, gamma);
        let (fr, _) = wave_function(p, right, gamma);
        Ok(ExactRiemann {
            left,
            right,
            gamma,
            p_star: p,
            u_star: 0.5 * (left.u + right.u) + 0.5 * (fr - fl),
        })
    }

    /// Solution at similarity coordinate `xi = (x - x0) / t`.
    pub fn sample(&self, xi: f64) -> Riemann1d {
        let g = self.gamma;
        let (ps, us) = (self.p_star, self.u_star);
        if xi <= us {
            let s = self.left;
            let c = (g * s.p / s.rho).sqrt();
            if ps > s.p {
                let ratio = ps / s.p;
                let speed = s.u - c * ((g + 1.0) / (2.0 * g) * ratio + (g - 1.0) / (2.0 * g)).sqrt();
                if xi <= speed {
                    s
                } else {
                    let rho = s.rho * (ratio + (g - 1.0) / (g + 1.0)) / ((g - 1.0) / (g + 1.0) * ratio + 1.0);
                    Riemann1d { rho, u: us, p: ps }
                }
            } else {
                let head = s.u - c;
                let cs = c * (ps / s.p).powf((g - 1.0) / (2.0 * g));
                let tail = us - cs;
                if xi <= head {
                    s
                } else if xi >= tail {
                    Riemann1d { rho: s.rho * (ps / s.p).powf(1.0 / g), u: us, p: ps }
                } else {
                    let f = 2.0 / (g + 1.0) + (g - 1.0) / ((g + 1.0) * c) * (s.u - xi);
                    Riemann1d {
                        rho: s.rho * f.powf(2.0 / (g - 1.0)),
                        u: 2.0 / (g + 1.0) * (c + (g - 1.0) / 2.0 * s.u + xi),
                        p: s.p * f.powf(2.0 * g / (g - 1.0)),
                    }
                }
            }
        } else {
            let s = self.right;
            let c = (g * s.p / s.rho).sqrt();
            if ps > s.p {
                let ratio = ps / s.p;
                let speed = s.u + c * ((g + 1.0) / (2.0 * g) * ratio + (g - 1.0) / (2.0 * g)).sqrt();
                if xi >= speed {
                    s
                } else {
                    let rho = s.rho * (ratio + (g - 1.0) / (g + 1.0)) / ((g - 1.0) / (g + 1.0) * ratio + 1.0);
                    Riemann1d { rho, u: us, p: ps }
                }
            } else {
                let head = s.u + c;
                let cs = c * (ps / s.p).powf((g - 1.0) / (2.0 * g));
                let tail = us + cs;
                if xi >= head {
                    s
                } else if xi <= tail {
                    Riemann1d { rho: s.rho * (ps / s.p).powf(1.0 / g), u: us, p: ps }
                } else {
                    let f = 2.0 / (g + 1.0) - (g - 1.0) / ((g + 1.0) * c) * (s.u - xi);
                    Riemann1d {
                        rho: s.rho * f.powf(2.0 / (g - 1.0)),
                        u: 2.0 / (g + 1.0) * (-c + (g - 1.0) / 2.0 * s.u + xi),
                        p: s.p * f.powf(2.0 * g / (g - 1.0)),
                    }
                }
            }
        }
    }

    /// Solution at `x` and time `t > 0` for an initial jump at `x0`.
    pub fn at(&self, x: f64, x0: f64, t: f64) -> Riemann1d {
        self.sample((x - x0) / t)
    }
}

/// Pressure function of one side and its derivative.
fn wave_function(p: f64, s: Riemann1d, g: f64) -> (f64, f64) {
    if p > s.p {
        let a = 2.0 / ((g + 1.0) * s.rho);
        let b = (g - 1.0) / (g + 1.0) * s.p;
        let q = (a / (p + b)).sqrt();
        ((p - s.p) * q, q * (1.0 - 0.5 * (p - s.p) / (p + b)))
    } else {
        let c = (g * s.p / s.rho).sqrt();
        let r = p / s.p;
        (
            2.0 * c / (g - 1.0) * (r.powf((g - 1.0) / (2.0 * g)) - 1.0),
            r.powf(-(g + 1.0) / (2.0 * g)) / (s.rho * c),
        )
    }
}

/// Standard shock-tube data: `(1, 0, 1)` left, `(0.125, 0, 0.1)` right.
pub fn sod_problem(gamma: f64) -> Result<ExactRiemann> {
    ExactRiemann::new(
        Riemann1d { rho: 1.0, u: 0.0, p: 1.0 },
        Riemann1d { rho: 0.125, u: 0.0, p: 0.1 },
        gamma,
    )
}
