//! High-order DG solver for 2D compressible flow with mixture-model shock sensing.

pub mod basis;
pub mod boundary;
pub mod cases;
pub mod clustering;
pub mod config;
pub mod driver;
pub mod error;
pub mod exact;
pub mod gas;
pub mod mesh;
pub mod sensors;
pub mod snapshot;
pub mod spatial;
pub mod time;

pub use config::CaseConfig;
pub use driver::{run_case, Solver};
pub use error::{Error, Result};
