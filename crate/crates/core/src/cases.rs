//! Benchmark initial conditions and boundary setups.

use std::f64::consts::PI;

use crate::basis::OperatorSet;
use crate::boundary::{BoundaryCondition, BoundarySet};
use crate::config::{BoundarySpec, CaseConfig, CaseKind};
use crate::error::Result;
use crate::gas::{conservative_from_primitive, GasModel, Primitive, State};
use crate::mesh::{build_cartesian_mesh, MeshConfig, Side};
use crate::spatial::{ConservativeField, Discretization};

/// Incident shock angle relative to the wall normal.
pub const DMR_ANGLE: f64 = PI / 6.0;
pub const DMR_X0: f64 = 1.0 / 6.0;
pub const DMR_SHOCK_SPEED: f64 = 10.0;
pub const DMR_POST: Primitive = Primitive { rho: 8.0, u: 7.145, v: -4.125, p: 116.5 };
pub const DMR_PRE: Primitive = Primitive { rho: 1.4, u: 0.0, v: 0.0, p: 1.0 };

pub const SOD_INTERFACE: f64 = 0.5;

/// `exp(-r^2 / (2 sigma^2)) / (4 pi sigma^2)`
pub fn sedov_bump(r: f64, sigma: f64) -> f64 {
    (-r * r / (2.0 * sigma * sigma)).exp() / (4.0 * PI * sigma * sigma)
}

pub fn sedov_primitive(x: f64, y: f64) -> Primitive {
    let r = (x * x + y * y).sqrt();
    Primitive::new(1.0 + sedov_bump(r, 0.25), 0.0, 0.0, 1e-2 + sedov_bump(r, 0.15))
}

pub fn dmr_primitive(x: f64, y: f64, t: f64) -> Primitive {
    let xw = crate::boundary::shock_position(DMR_X0, DMR_ANGLE, DMR_SHOCK_SPEED, y, t);
    if x <= xw {
        DMR_POST
    } else {
        DMR_PRE
    }
}

pub fn sod_primitive(x: f64) -> Primitive {
    if x < SOD_INTERFACE {
        Primitive::new(1.0, 0.0, 0.0, 1.0)
    } else {
        Primitive::new(0.125, 0.0, 0.0, 0.1)
    }
}

/// `rho = 2 + sin(pi (x - t))`, `u = 1`, `v = 0`, `p = 1`; exact on a periodic box of period 2.
pub fn density_wave_primitive(x: f64, t: f64) -> Primitive {
    Primitive::new(2.0 + (PI * (x - t)).sin(), 1.0, 0.0, 1.0)
}

fn dmr_shock_bc(gas: &GasModel) -> BoundaryCondition {
    BoundaryCondition::MovingShock {
        x0: DMR_X0,
        angle: DMR_ANGLE,
        speed: DMR_SHOCK_SPEED,
        post: conservative_from_primitive(&DMR_POST, gas),
        pre: conservative_from_primitive(&DMR_PRE, gas),
    }
}

pub fn default_boundaries(case: CaseKind, gas: &GasModel) -> BoundarySet {
    match case {
        CaseKind::Sod => BoundarySet {
            west: BoundaryCondition::SlipWall,
            east: BoundaryCondition::SlipWall,
            south: BoundaryCondition::Periodic,
            north: BoundaryCondition::Periodic,
        },
        CaseKind::Sedov => BoundarySet::uniform(BoundaryCondition::SlipWall),
        CaseKind::Dmr => {
            let shock = dmr_shock_bc(gas);
            BoundarySet {
                west: shock.clone(),
                east: shock.clone(),
                north: shock.clone(),
                south: BoundaryCondition::SplitX {
                    x_split: DMR_X0,
                    left: Box::new(BoundaryCondition::Dirichlet(conservative_from_primitive(&DMR_POST, gas))),
                    right: Box::new(BoundaryCondition::SlipWall),
                },
            }
        }
        CaseKind::DensityWave => BoundarySet::periodic(),
    }
}

fn from_spec(spec: &BoundarySpec, gas: &GasModel) -> BoundaryCondition {
    match spec {
        BoundarySpec::Periodic => BoundaryCondition::Periodic,
        BoundarySpec::SlipWall => BoundaryCondition::SlipWall,
        BoundarySpec::Outflow { pressure } => BoundaryCondition::Outflow { pressure: *pressure },
        BoundarySpec::Dirichlet { rho, u, v, p } => {
            BoundaryCondition::Dirichlet(conservative_from_primitive(&Primitive::new(*rho, *u, *v, *p), gas))
        }
    }
}

pub fn build_boundaries(cfg: &CaseConfig) -> BoundarySet {
    let mut set = default_boundaries(cfg.case, &cfg.gas);
    for side in Side::ALL {
        let spec = match side {
            Side::West => &cfg.boundary.west,
            Side::East => &cfg.boundary.east,
            Side::South => &cfg.boundary.south,
            Side::North => &cfg.boundary.north,
        };
        if let Some(spec) = spec {
            let bc = from_spec(spec, &cfg.gas);
            match side {
                Side::West => set.west = bc,
                Side::East => set.east = bc,
                Side::South => set.south = bc,
                Side::North => set.north = bc,
            }
        }
    }
    set
}

/// Mesh, operators and boundaries for a configured case.
pub fn build_discretization(cfg: &CaseConfig) -> Result<Discretization> {
    let boundaries = build_boundaries(cfg);
    let (px, py) = boundaries.periodicity()?;
    let mesh = build_cartesian_mesh(&MeshConfig {
        periodic_x: px,
        periodic_y: py,
        ..cfg.mesh.clone()
    })?;
    let ops = OperatorSet::new(cfg.order)?;
    Ok(Discretization::new(mesh, ops, cfg.gas, boundaries)?.with_viscosity(cfg.viscosity))
}

pub fn initial_primitive(case: CaseKind, x: f64, y: f64) -> Primitive {
    match case {
        CaseKind::Sod => sod_primitive(x),
        CaseKind::Sedov => sedov_primitive(x, y),
        CaseKind::Dmr => dmr_primitive(x, y, 0.0),
        CaseKind::DensityWave => density_wave_primitive(x, 0.0),
    }
}

pub fn initial_state(case: CaseKind, disc: &Discretization) -> ConservativeField {
    let gas = *disc.gas();
    disc.project(|x, y| -> State { conservative_from_primitive(&initial_primitive(case, x, y), &gas) })
}
