//! Synthetic plume data oracle.
//!
//! Produces ground-truth dispersion sequences at desk scale: Latin hypercube
//! sampling of wind conditions, procedural terrain, a terrain-following
//! log-profile wind field made mass-consistent by a divergence projection,
//! and an explicit upwind finite-volume advection plus centered diffusion
//! solver with exact mass bookkeeping.

pub mod config;
pub mod error;
pub mod lhs;
pub mod solver;
pub mod terrain;
pub mod wind;

pub use config::{SimConfig, TerrainConfig, WindOptions};
pub use error::SimError;
pub use lhs::{latin_hypercube, sample_conditions};
pub use solver::{simulate_release, MassBalanceRecord, SimulationRun};
pub use terrain::{generate_terrain, TerrainField};
pub use wind::{build_wind_field, VelocityField};
