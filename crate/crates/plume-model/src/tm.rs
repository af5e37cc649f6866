//! Temporal module: predicts the next low-resolution frame from a window of
//! five frames.

use ndarray::{Array3, Array4, Array5, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use plume_nn::{BatchModel, NnError, Param};

use crate::temporal_unet::{BottleneckKind, BuildReport, SkipMode, TemporalUnet};

/// Parameter count reported for this architecture in its source description;
/// logged next to the built count, never asserted against other widths.
pub const TM_REFERENCE_PARAM_COUNT: usize = 3_214_401;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TMConfig {
    /// Encoder channel widths. The default (64, 128, 256) reproduces the
    /// published 3,214,401-parameter count exactly; `sevenfold()` gives the
    /// literal 7x16/32/64 reading of the layer table.
    pub enc_channels: [usize; 3],
    pub dropout: f64,
    pub bottleneck: BottleneckKind,
    pub skip: SkipMode,
    pub input_window: usize,
    pub input_shape: [usize; 3],
    pub seed: u64,
}

impl Default for TMConfig {
    fn default() -> Self {
        TMConfig {
            enc_channels: [64, 128, 256],
            dropout: 0.2,
            bottleneck: BottleneckKind::Conv,
            skip: SkipMode::Additive,
            input_window: 5,
            input_shape: [8, 32, 32],
            seed: 0x544d,
        }
    }
}

impl TMConfig {
    /// Channel widths under the literal "7 x" multiplier reading.
    pub fn sevenfold() -> Self {
        TMConfig {
            enc_channels: [112, 224, 448],
            ..TMConfig::default()
        }
    }
}

pub struct TemporalModel {
    pub config: TMConfig,
    pub(crate) core: TemporalUnet,
}

impl TemporalModel {
    pub fn build(config: TMConfig) -> Result<(Self, BuildReport), NnError> {
        let (core, report) = TemporalUnet::build(
            config.input_window,
            config.input_shape,
            config.enc_channels,
            config.dropout,
            config.bottleneck,
            config.skip,
            config.seed,
        )?;
        log::info!(
            "TM built: {} parameters (reference {});\n{}",
            report.param_count,
            TM_REFERENCE_PARAM_COUNT,
            report.render()
        );
        Ok((TemporalModel { config, core }, report))
    }

    pub fn param_count(&mut self) -> usize {
        self.core.params_mut().iter().map(|p| p.len()).sum()
    }

    /// One prediction from a `(window, Z, Y, X)` input, batch free.
    pub fn predict_step(&self, window: &Array4<f32>) -> Result<Array3<f32>, NnError> {
        let w = self.config.input_window;
        let [z, y, x] = self.config.input_shape;
        if window.shape() != [w, z, y, x] {
            return Err(NnError::invalid(format!(
                "window shape {:?}, expected ({w}, {z}, {y}, {x})",
                window.shape()
            )));
        }
        let batched = window
            .clone()
            .into_shape_with_order((1, w, z, y, x))
            .expect("batch reshape");
        let out = self.core.infer(&batched);
        Ok(out.index_axis(Axis(0), 0).index_axis(Axis(0), 0).to_owned())
    }

    /// Batched prediction `(B, window, Z, Y, X) -> (B, 1, Z, Y, X)`.
    pub fn predict_batch(&self, windows: &Array5<f32>) -> Result<Array5<f32>, NnError> {
        let w = self.config.input_window;
        let [z, y, x] = self.config.input_shape;
        let s = windows.shape();
        if s.len() != 5 || s[1..] != [w, z, y, x] {
            return Err(NnError::invalid(format!(
                "batch shape {s:?}, expected (B, {w}, {z}, {y}, {x})"
            )));
        }
        Ok(self.core.infer(windows))
    }
}

impl BatchModel for TemporalModel {
    fn forward_train(&mut self, x: Array5<f32>, rng: &mut ChaCha8Rng) -> Array5<f32> {
        self.core.forward_train(x, rng)
    }

    fn backward(&mut self, dy: &Array5<f32>) {
        self.core.backward(dy)
    }

    fn infer_batch(&self, x: &Array5<f32>) -> Array5<f32> {
        self.core.infer(x)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.core.params_mut()
    }

    fn state_blobs(&self) -> Vec<(String, Vec<f32>)> {
        self.core.state_blobs()
    }

    fn load_state_blobs(
        &mut self,
        lookup: &mut dyn FnMut(&str) -> Option<Vec<f32>>,
    ) -> Result<(), NnError> {
        self.core.load_state_blobs(lookup)
    }
}
