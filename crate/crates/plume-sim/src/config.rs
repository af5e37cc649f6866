//! Solver and terrain configuration.

use serde::{Deserialize, Serialize};

use crate::error::SimError;

/// Physics and discretization parameters for one simulated release.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    /// Domain extent (z, y, x) in metres.
    pub domain_extent_zyx: [f64; 3],
    /// Grid cells (z, y, x).
    pub grid_cells_zyx: [usize; 3],
    /// Solver substep in seconds; `None` picks 0.9 of the stability bound,
    /// rounded so that an integer number of substeps fits one output step.
    pub dt_solver: Option<f64>,
    /// Output cadence in seconds.
    pub dt_output: f64,
    pub n_output_steps: usize,
    /// Eddy diffusivity in m^2/s.
    pub diffusivity: f64,
    /// Radioactive decay half-life in seconds; `None` disables decay.
    pub decay_half_life: Option<f64>,
    pub terrain: TerrainConfig,
    pub wind: WindOptions,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            domain_extent_zyx: [4000.0, 10_000.0, 10_000.0],
            grid_cells_zyx: [50, 125, 125],
            dt_solver: None,
            dt_output: 600.0,
            n_output_steps: 33,
            diffusivity: 15.0,
            decay_half_life: None,
            terrain: TerrainConfig::default(),
            wind: WindOptions::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.grid_cells_zyx.iter().any(|&n| n == 0) {
            return Err(SimError::InvalidConfig("grid cells must be positive".into()));
        }
        if self.domain_extent_zyx.iter().any(|&e| !(e > 0.0)) {
            return Err(SimError::InvalidConfig("domain extent must be positive".into()));
        }
        if !(self.dt_output > 0.0) || self.n_output_steps == 0 {
            return Err(SimError::InvalidConfig("output cadence must be positive".into()));
        }
        if self.diffusivity < 0.0 {
            return Err(SimError::InvalidConfig("diffusivity must be non-negative".into()));
        }
        if let Some(dt) = self.dt_solver {
            if !(dt > 0.0 && dt <= self.dt_output) {
                return Err(SimError::InvalidConfig(
                    "dt_solver must be in (0, dt_output]".into(),
                ));
            }
        }
        Ok(())
    }

    /// Cell edge lengths (z, y, x) in metres.
    pub fn cell_size_zyx(&self) -> [f64; 3] {
        [
            self.domain_extent_zyx[0] / self.grid_cells_zyx[0] as f64,
            self.domain_extent_zyx[1] / self.grid_cells_zyx[1] as f64,
            self.domain_extent_zyx[2] / self.grid_cells_zyx[2] as f64,
        ]
    }

    pub fn decay_rate(&self) -> f64 {
        match self.decay_half_life {
            Some(t_half) if t_half > 0.0 => std::f64::consts::LN_2 / t_half,
            _ => 0.0,
        }
    }
}

/// Procedural terrain: a sum of randomized anisotropic ridges and bumps,
/// rescaled to span `[0, amplitude]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TerrainConfig {
    /// Total relief in metres; 0 produces flat ground.
    pub amplitude: f64,
    /// Horizontal correlation length in metres; controls feature width.
    pub correlation_length: f64,
    /// Number of ridge/bump features.
    pub n_features: usize,
}

impl Default for TerrainConfig {
    fn default() -> Self {
        TerrainConfig {
            amplitude: 400.0,
            correlation_length: 900.0,
            n_features: 24,
        }
    }
}

/// Wind-profile and projection options.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindOptions {
    /// Reference height in metres at which the profile equals the sampled speed.
    pub reference_height: f64,
    /// Aerodynamic roughness length in metres.
    pub roughness_length: f64,
    /// Target for the post-projection divergence, as a fraction of
    /// `speed / min_cell_size`.
    pub projection_rel_tol: f64,
    pub projection_max_iter: usize,
}

impl Default for WindOptions {
    fn default() -> Self {
        WindOptions {
            reference_height: 10.0,
            roughness_length: 0.1,
            projection_rel_tol: 1e-7,
            projection_max_iter: 20_000,
        }
    }
}
