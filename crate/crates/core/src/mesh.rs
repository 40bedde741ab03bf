//! Structured Cartesian meshes with affine element maps.
//!
//! Element `e = ix + iy * nx`. Each element maps `[-1,1]^2` onto
//! `[x_c - dx/2, x_c + dx/2] x [y_c - dy/2, y_c + dy/2]`, so the Jacobian and
//! the contravariant metric vectors are the same constants everywhere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    West,
    East,
    South,
    North,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::West, Side::East, Side::South, Side::North];

    /// Outward unit normal.
    pub fn normal(self) -> [f64; 2] {
        match self {
            Side::West => [-1.0, 0.0],
            Side::East => [1.0, 0.0],
            Side::South => [0.0, -1.0],
            Side::North => [0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Neighbor {
    Element(usize),
    Boundary(Side),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    pub nx: usize,
    pub ny: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    #[serde(default)]
    pub periodic_x: bool,
    #[serde(default)]
    pub periodic_y: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CartesianMesh {
    nx: usize,
    ny: usize,
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
    dx: f64,
    dy: f64,
    periodic_x: bool,
    periodic_y: bool,
}

pub fn build_cartesian_mesh(config: &MeshConfig) -> Result<CartesianMesh> {
    if config.nx == 0 || config.ny == 0 {
        return Err(Error::InvalidMesh(format!(
            "element counts must be positive, got {}x{}",
            config.nx, config.ny
        )));
    }
    let lx = config.x_max - config.x_min;
    let ly = config.y_max - config.y_min;
    if !(lx > 0.0 && ly > 0.0 && lx.is_finite() && ly.is_finite()) {
        return Err(Error::InvalidMesh(format!(
            "domain [{}, {}] x [{}, {}] has no area",
            config.x_min, config.x_max, config.y_min, config.y_max
        )));
    }
    Ok(CartesianMesh {
        nx: config.nx,
        ny: config.ny,
        x_min: config.x_min,
        y_min: config.y_min,
        x_max: config.x_max,
        y_max: config.y_max,
        dx: lx / config.nx as f64,
        dy: ly / config.ny as f64,
        periodic_x: config.periodic_x,
        periodic_y: config.periodic_y,
    })
}

impl CartesianMesh {
    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn num_elements(&self) -> usize {
        self.nx * self.ny
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn dy(&self) -> f64 {
        self.dy
    }

    pub fn bounds(&self) -> ([f64; 2], [f64; 2]) {
        ([self.x_min, self.x_max], [self.y_min, self.y_max])
    }

    pub fn periodic(&self) -> (bool, bool) {
        (self.periodic_x, self.periodic_y)
    }

    pub fn config(&self) -> MeshConfig {
        MeshConfig {
            nx: self.nx,
            ny: self.ny,
            x_min: self.x_min,
            x_max: self.x_max,
            y_min: self.y_min,
            y_max: self.y_max,
            periodic_x: self.periodic_x,
            periodic_y: self.periodic_y,
        }
    }

    #[inline]
    pub fn element(&self, ix: usize, iy: usize) -> usize {
        ix + iy * self.nx
    }

    #[inline]
    pub fn element_coords(&self, e: usize) -> (usize, usize) {
        (e % self.nx, e / self.nx)
    }

    /// Determinant of the affine map, `(dx/2)(dy/2)`.
    pub fn jacobian(&self) -> f64 {
        0.25 * self.dx * self.dy
    }

    /// Contravariant metric vectors `J a^1` and `J a^2`.
    pub fn contravariant_metrics(&self) -> [[f64; 2]; 2] {
        [[0.5 * self.dy, 0.0], [0.0, 0.5 * self.dx]]
    }

    /// Element area.
    pub fn volume(&self) -> f64 {
        self.dx * self.dy
    }

    pub fn center(&self, e: usize) -> [f64; 2] {
        let (ix, iy) = self.element_coords(e);
        [
            self.x_min + (ix as f64 + 0.5) * self.dx,
            self.y_min + (iy as f64 + 0.5) * self.dy,
        ]
    }

    /// Physical position of reference point `(xi, eta)` inside element `e`.
    pub fn map_point(&self, e: usize, xi: f64, eta: f64) -> [f64; 2] {
        let c = self.center(e);
        [c[0] + 0.5 * self.dx * xi, c[1] + 0.5 * self.dy * eta]
    }

    pub fn neighbor(&self, e: usize, side: Side) -> Neighbor {
        let (ix, iy) = self.element_coords(e);
        let (nx, ny) = (self.nx, self.ny);
        match side {
            Side::West if ix > 0 => Neighbor::Element(self.element(ix - 1, iy)),
            Side::West if self.periodic_x => Neighbor::Element(self.element(nx - 1, iy)),
            Side::East if ix + 1 < nx => Neighbor::Element(self.element(ix + 1, iy)),
            Side::East if self.periodic_x => Neighbor::Element(self.element(0, iy)),
            Side::South if iy > 0 => Neighbor::Element(self.element(ix, iy - 1)),
            Side::South if self.periodic_y => Neighbor::Element(self.element(ix, ny - 1)),
            Side::North if iy + 1 < ny => Neighbor::Element(self.element(ix, iy + 1)),
            Side::North if self.periodic_y => Neighbor::Element(self.element(ix, 0)),
            _ => Neighbor::Boundary(side),
        }
    }

    /// Number of distinct x-normal faces per element row.
    pub fn x_faces_per_row(&self) -> usize {
        if self.periodic_x {
            self.nx
        } else {
            self.nx + 1
        }
    }

    /// Number of distinct y-normal faces per element column.
    pub fn y_faces_per_column(&self) -> usize {
        if self.periodic_y {
            self.ny
        } else {
            self.ny + 1
        }
    }

    /// Elements on the minus and plus side of the x-face `(i, iy)`, where face
    /// `i` sits at the west edge of column `i`.
    pub fn x_face_owners(&self, i: usize, iy: usize) -> (Neighbor, Neighbor) {
        let minus = if i > 0 {
            Neighbor::Element(self.element(i - 1, iy))
        } else if self.periodic_x {
            Neighbor::Element(self.element(self.nx - 1, iy))
        } else {
            Neighbor::Boundary(Side::West)
        };
        let plus = if i < self.nx {
            Neighbor::Element(self.element(i, iy))
        } else {
            Neighbor::Boundary(Side::East)
        };
        (minus, plus)
    }

    /// Same as [`Self::x_face_owners`] for y-faces `(ix, j)`.
    pub fn y_face_owners(&self, ix: usize, j: usize) -> (Neighbor, Neighbor) {
        let minus = if j > 0 {
            Neighbor::Element(self.element(ix, j - 1))
        } else if self.periodic_y {
            Neighbor::Element(self.element(ix, self.ny - 1))
        } else {
            Neighbor::Boundary(Side::South)
        };
        let plus = if j < self.ny {
            Neighbor::Element(self.element(ix, j))
        } else {
            Neighbor::Boundary(Side::North)
        };
        (minus, plus)
    }

    /// Index into the x-face array for the west (`east = false`) or east face of `e`.
    pub fn x_face_of(&self, e: usize, east: bool) -> usize {
        let (ix, iy) = self.element_coords(e);
        let mut i = ix + usize::from(east);
        if self.periodic_x && i == self.nx {
            i = 0;
        }
        i + iy * self.x_faces_per_row()
    }

    /// Index into the y-face array for the south or north face of `e`.
    pub fn y_face_of(&self, e: usize, north: bool) -> usize {
        let (ix, iy) = self.element_coords(e);
        let mut j = iy + usize::from(north);
        if self.periodic_y && j == self.ny {
            j = 0;
        }
        j + ix * self.y_faces_per_column()
    }
}
