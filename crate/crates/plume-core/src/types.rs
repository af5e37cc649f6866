//! Core domain types shared across the generator, models, and evaluation.

use std::sync::Arc;

use ndarray::{Array3, Array4, ArrayView3, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::CoreError;

/// Sampled inflow condition: wind speed in m/s and meteorological wind
/// direction in degrees (the direction the wind blows FROM; 360 = from
/// north, so air moves toward -y).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindCondition {
    pub speed_ms: f64,
    pub direction_deg: f64,
}

impl WindCondition {
    /// Speed range covered by the experimental design.
    pub const SPEED_RANGE: (f64, f64) = (1.5, 10.0);
    /// Direction range covered by the experimental design.
    pub const DIRECTION_RANGE: (f64, f64) = (340.0, 360.0);

    /// Unit vector (x, y) of air motion under the from-north convention.
    pub fn flow_direction_xy(&self) -> (f64, f64) {
        let theta = self.direction_deg.to_radians();
        (-theta.sin(), -theta.cos())
    }
}

/// Point-source release specification.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SourceSpec {
    /// Horizontal source position in metres.
    pub x_release: f64,
    pub y_release: f64,
    /// Release height above ground in metres; `None` places the release one
    /// cell above the local terrain at the source column.
    pub z_release: Option<f64>,
    /// Emitted mass per second (unit-mass scale).
    pub emission_rate: f64,
}

impl Default for SourceSpec {
    fn default() -> Self {
        SourceSpec {
            x_release: 5000.0,
            y_release: 5000.0,
            z_release: None,
            emission_rate: 1.0,
        }
    }
}

/// Time-ordered stack of 3D concentration grids, with metadata.
///
/// `values` is indexed `(t, z, y, x)`. Frame `k` is the state `k` output
/// intervals after the first recorded frame; `time_of_frame(k)` labels it
/// with `k * dt_output` seconds from release (the generator primes the
/// source so frame 0 already carries mass).
#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationSequence {
    pub values: Array4<f32>,
    /// Output cadence in seconds.
    pub dt_output: f64,
    /// Cell edge lengths (z, y, x) in metres.
    pub cell_size_zyx: [f64; 3],
    /// Domain offset of the low corner of cell (0, 0, 0), in metres.
    pub origin_zyx: [f64; 3],
}

impl ConcentrationSequence {
    pub fn new(
        values: Array4<f32>,
        dt_output: f64,
        cell_size_zyx: [f64; 3],
        origin_zyx: [f64; 3],
    ) -> Self {
        ConcentrationSequence {
            values,
            dt_output,
            cell_size_zyx,
            origin_zyx,
        }
    }

    pub fn n_steps(&self) -> usize {
        self.values.shape()[0]
    }

    /// Spatial grid shape (z, y, x).
    pub fn grid_shape(&self) -> [usize; 3] {
        let s = self.values.shape();
        [s[1], s[2], s[3]]
    }

    /// Physical extent (z, y, x) in metres of the stored grid.
    pub fn extent_zyx(&self) -> [f64; 3] {
        let g = self.grid_shape();
        [
            g[0] as f64 * self.cell_size_zyx[0],
            g[1] as f64 * self.cell_size_zyx[1],
            g[2] as f64 * self.cell_size_zyx[2],
        ]
    }

    pub fn cell_volume(&self) -> f64 {
        self.cell_size_zyx.iter().product()
    }

    /// Seconds from release for frame `k`.
    pub fn time_of_frame(&self, k: usize) -> f64 {
        k as f64 * self.dt_output
    }

    pub fn frame(&self, k: usize) -> ArrayView3<'_, f32> {
        self.values.index_axis(Axis(0), k)
    }

    /// Total mass of frame `k` (concentration integrated over the volume).
    pub fn frame_mass(&self, k: usize) -> f64 {
        let v = self.cell_volume();
        self.frame(k).iter().map(|&c| c as f64).sum::<f64>() * v
    }

    /// Replaces the value array, keeping metadata.
    pub fn with_values(&self, values: Array4<f32>) -> Self {
        ConcentrationSequence {
            values,
            dt_output: self.dt_output,
            cell_size_zyx: self.cell_size_zyx,
            origin_zyx: self.origin_zyx,
        }
    }
}

/// Paired low/high-resolution sequences for one simulated run.
#[derive(Debug, Clone)]
pub struct DualResolutionSample {
    pub run_id: String,
    pub condition: WindCondition,
    pub lr: ConcentrationSequence,
    pub hr: ConcentrationSequence,
}

/// Low-resolution tensor shape (z, y, x) used for model parity.
pub const LR_SHAPE: [usize; 3] = [8, 32, 32];
/// High-resolution tensor shape (z, y, x) used for model parity.
pub const HR_SHAPE: [usize; 3] = [32, 128, 128];
/// Number of retained output steps per run.
pub const N_STEPS: usize = 33;
/// Temporal context length of the forecasting window.
pub const WINDOW_LEN: usize = 5;

/// Log-space affine normalization, fitted on the training split only.
///
/// Values map as `v -> (log10(max(v, log_floor)) - min_val) / (max_val - min_val)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    /// Floor epsilon in source concentration units.
    pub log_floor: f64,
    /// Lower bound in log10 space.
    pub min_val: f64,
    /// Upper bound in log10 space.
    pub max_val: f64,
}

impl NormalizationSpec {
    pub fn validate(&self) -> Result<(), CoreError> {
        if !(self.log_floor > 0.0 && self.log_floor.is_finite()) {
            return Err(CoreError::invalid("log_floor must be positive and finite"));
        }
        if !(self.min_val.is_finite() && self.max_val.is_finite()) || self.max_val <= self.min_val {
            return Err(CoreError::InvalidSpec {
                min_val: self.min_val,
                max_val: self.max_val,
            });
        }
        Ok(())
    }

    /// Fits bounds over the given training-split arrays. The lower bound is
    /// pinned to `log10(log_floor)` so zero concentration maps to 0.
    pub fn fit<'a>(
        arrays: impl IntoIterator<Item = ArrayView4<'a, f32>>,
        log_floor: f64,
    ) -> Result<Self, CoreError> {
        let floor_log = log_floor.log10();
        let mut max_log = floor_log;
        let mut seen = false;
        for arr in arrays {
            for &v in arr.iter() {
                let l = (v as f64).max(log_floor).log10();
                if l > max_log {
                    max_log = l;
                }
            }
            seen = true;
        }
        if !seen {
            return Err(CoreError::invalid("cannot fit normalization on no data"));
        }
        if max_log <= floor_log {
            // Degenerate all-zero corpus; keep a unit span so the map is defined.
            max_log = floor_log + 1.0;
        }
        let spec = NormalizationSpec {
            log_floor,
            min_val: floor_log,
            max_val: max_log,
        };
        spec.validate()?;
        Ok(spec)
    }

    #[inline]
    pub fn normalize_value(&self, v: f64) -> f64 {
        (v.max(self.log_floor).log10() - self.min_val) / (self.max_val - self.min_val)
    }

    #[inline]
    pub fn denormalize_value(&self, n: f64) -> f64 {
        10f64.powf(n * (self.max_val - self.min_val) + self.min_val)
    }

    pub fn normalize_array(&self, values: &Array4<f32>) -> Array4<f32> {
        values.mapv(|v| self.normalize_value(v as f64) as f32)
    }

    pub fn denormalize_array(&self, values: &Array4<f32>) -> Array4<f32> {
        values.mapv(|v| self.denormalize_value(v as f64) as f32)
    }

    pub fn normalize_frame(&self, frame: &Array3<f32>) -> Array3<f32> {
        frame.mapv(|v| self.normalize_value(v as f64) as f32)
    }

    pub fn denormalize_frame(&self, frame: &Array3<f32>) -> Array3<f32> {
        frame.mapv(|v| self.denormalize_value(v as f64) as f32)
    }
}

/// Five consecutive frames plus the following target frame, referencing a
/// shared sequence array. `target index = start + 5`.
#[derive(Debug, Clone)]
pub struct SlidingWindow {
    pub frames: Arc<Array4<f32>>,
    pub start: usize,
}

impl SlidingWindow {
    /// The five input frames `(5, Z, Y, X)`.
    pub fn inputs(&self) -> ArrayView4<'_, f32> {
        self.frames
            .slice(ndarray::s![self.start..self.start + WINDOW_LEN, .., .., ..])
    }

    /// The single prediction target `(Z, Y, X)` at `start + 5`.
    pub fn target(&self) -> ArrayView3<'_, f32> {
        self.frames.index_axis(Axis(0), self.start + WINDOW_LEN)
    }
}
