//! Boundary conditions evaluated as exterior ghost states.

use crate::error::{Error, Result};
use crate::gas::{outflow_state, slip_wall_state, GasModel, State};
use crate::mesh::Side;

#[derive(Debug, Clone, PartialEq)]
pub enum BoundaryCondition {
    /// Handled by mesh connectivity; never asked for a ghost state.
    Periodic,
    SlipWall,
    Dirichlet(State),
    Outflow { pressure: f64 },
    /// Exterior state switches from `post` to `pre` across the moving front
    /// `x_w(y, t) = x0 + y tan(angle) + speed t / cos(angle)`.
    MovingShock {
        x0: f64,
        angle: f64,
        speed: f64,
        post: State,
        pre: State,
    },
    /// `left` for `x < x_split`, `right` otherwise.
    SplitX {
        x_split: f64,
        left: Box<BoundaryCondition>,
        right: Box<BoundaryCondition>,
    },
}

impl BoundaryCondition {
    /// Ghost state seen across a boundary face at physical point `pos`.
    pub fn exterior(
        &self,
        q: &State,
        normal: [f64; 2],
        pos: [f64; 2],
        t: f64,
        gas: &GasModel,
    ) -> Result<State> {
        match self {
            BoundaryCondition::Periodic => Err(Error::Config(
                "periodic boundary has no exterior state; enable mesh periodicity".into(),
            )),
            BoundaryCondition::SlipWall => Ok(slip_wall_state(q, normal)),
            BoundaryCondition::Dirichlet(state) => Ok(*state),
            BoundaryCondition::Outflow { pressure } => outflow_state(q, normal, *pressure, gas),
            BoundaryCondition::MovingShock {
                x0,
                angle,
                speed,
                post,
                pre,
            } => {
                let xw = shock_position(*x0, *angle, *speed, pos[1], t);
                Ok(if pos[0] <= xw { *post } else { *pre })
            }
            BoundaryCondition::SplitX { x_split, left, right } => {
                if pos[0] < *x_split {
                    left.exterior(q, normal, pos, t, gas)
                } else {
                    right.exterior(q, normal, pos, t, gas)
                }
            }
        }
    }

    pub fn is_periodic(&self) -> bool {
        matches!(self, BoundaryCondition::Periodic)
    }
}

pub fn shock_position(x0: f64, angle: f64, speed: f64, y: f64, t: f64) -> f64 {
    x0 + y * angle.tan() + speed * t / angle.cos()
}

/// Exterior state for one boundary face point; free-function form of [`BoundaryCondition::exterior`].
pub fn boundary_state(
    bc: &BoundaryCondition,
    q: &State,
    normal: [f64; 2],
    pos: [f64; 2],
    t: f64,
    gas: &GasModel,
) -> Result<State> {
    bc.exterior(q, normal, pos, t, gas)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySet {
    pub west: BoundaryCondition,
    pub east: BoundaryCondition,
    pub south: BoundaryCondition,
    pub north: BoundaryCondition,
}

impl BoundarySet {
    pub fn uniform(bc: BoundaryCondition) -> Self {
        BoundarySet {
            west: bc.clone(),
            east: bc.clone(),
            south: bc.clone(),
            north: bc,
        }
    }

    pub fn periodic() -> Self {
        Self::uniform(BoundaryCondition::Periodic)
    }

    pub fn side(&self, side: Side) -> &BoundaryCondition {
        match side {
            Side::West => &self.west,
            Side::East => &self.east,
            Side::South => &self.south,
            Side::North => &self.north,
        }
    }

    /// `(periodic_x, periodic_y)`; opposite sides must agree.
    pub fn periodicity(&self) -> Result<(bool, bool)> {
        let px = self.west.is_periodic();
        let py = self.south.is_periodic();
        if px != self.east.is_periodic() || py != self.north.is_periodic() {
            return Err(Error::Config(
                "periodic boundaries must be paired on opposite sides".into(),
            ));
        }
        Ok((px, py))
    }
}
