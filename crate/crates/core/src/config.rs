//! Run configuration read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gas::GasModel;
use crate::mesh::MeshConfig;
use crate::sensors::SensorConfig;
use crate::time::LimiterConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseKind {
    Sod,
    Sedov,
    Dmr,
    /// Density sine wave advected through a periodic box.
    DensityWave,
}

impl CaseKind {
    pub fn name(self) -> &'static str {
        match self {
            CaseKind::Sod => "sod",
            CaseKind::Sedov => "sedov",
            CaseKind::Dmr => "dmr",
            CaseKind::DensityWave => "density_wave",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilizationKind {
    None,
    #[default]
    Blending,
    Viscosity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilizationConfig {
    #[serde(default)]
    pub kind: StabilizationKind,
    #[serde(default = "default_alpha_max")]
    pub alpha_max: f64,
    #[serde(default)]
    pub mu0: f64,
}

fn default_alpha_max() -> f64 {
    0.5
}

impl Default for StabilizationConfig {
    fn default() -> Self {
        StabilizationConfig {
            kind: StabilizationKind::default(),
            alpha_max: default_alpha_max(),
            mu0: 0.0,
        }
    }
}

/// One side's boundary override; sides left out use the case default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BoundarySpec {
    Periodic,
    SlipWall,
    Outflow { pressure: f64 },
    Dirichlet { rho: f64, u: f64, v: f64, p: f64 },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub west: Option<BoundarySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub east: Option<BoundarySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub south: Option<BoundarySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub north: Option<BoundarySpec>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Steps between snapshots; 0 writes only the initial and final states.
    #[serde(default)]
    pub interval: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseConfig {
    pub case: CaseKind,
    pub order: usize,
    pub dt: f64,
    /// Number of steps; alternatively give `t_end`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Physical dynamic viscosity.
    #[serde(default)]
    pub viscosity: f64,
    pub mesh: MeshConfig,
    #[serde(default)]
    pub gas: GasModel,
    #[serde(default)]
    pub stabilization: StabilizationConfig,
    #[serde(default)]
    pub limiter: LimiterConfig,
    #[serde(default)]
    pub sensor: SensorConfig,
    #[serde(default)]
    pub boundary: BoundaryConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_seed() -> u64 {
    1
}

impl CaseConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: CaseConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.order == 0 {
            return Err(Error::InvalidOrder(0));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        match (self.steps, self.t_end) {
            (Some(_), Some(_)) => return Err(Error::Config("give either steps or t_end, not both".into())),
            (None, None) => return Err(Error::Config("one of steps or t_end is required".into())),
            (None, Some(t)) if !(t >= 0.0 && t.is_finite()) => {
                return Err(Error::Config(format!("t_end must be non-negative, got {t}")))
            }
            _ => {}
        }
        if !(self.viscosity >= 0.0) {
            return Err(Error::Config("viscosity must be non-negative".into()));
        }
        let st = &self.stabilization;
        if !(0.0..=1.0).contains(&st.alpha_max) {
            return Err(Error::Config(format!("alpha_max must lie in [0, 1], got {}", st.alpha_max)));
        }
        if !(st.mu0 >= 0.0) {
            return Err(Error::Config("mu0 must be non-negative".into()));
        }
        self.gas.validate()?;
        self.limiter.validate()?;
        self.sensor.validate()?;
        if self.mesh.nx == 0 || self.mesh.ny == 0 {
            return Err(Error::InvalidMesh("element counts must be positive".into()));
        }
        Ok(())
    }

    /// Steps and the length of the final step, which is shortened to land on `t_end`.
    pub fn schedule(&self) -> (usize, f64) {
        match (self.steps, self.t_end) {
            (Some(n), _) => (n, self.dt),
            (None, Some(t)) => {
                let n = (t / self.dt - 1e-9).ceil().max(0.0) as usize;
                let last = if n == 0 { 0.0 } else { t - (n - 1) as f64 * self.dt };
                (n, last)
            }
            (None, None) => (0, self.dt),
        }
    }
}
