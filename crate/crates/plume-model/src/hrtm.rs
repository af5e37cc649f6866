//! High-resolution temporal baseline: same autoencoder as the TM, applied
//! directly to (32, 128, 128) volumes.

use ndarray::{Array3, Array4, Array5, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use plume_nn::{BatchModel, NnError, Param};

use crate::temporal_unet::{BottleneckKind, BuildReport, SkipMode, TemporalUnet};

/// Published reference parameter count; `num_layers` is chosen so the built
/// count is closest, equality is not asserted.
pub const HRTM_REFERENCE_PARAM_COUNT: usize = 4_166_274;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HRTMConfig {
    /// Channel widths are `num_layers x base_channels` per stage.
    pub num_layers: usize,
    pub base_channels: [usize; 3],
    pub dropout: f64,
    pub bottleneck: BottleneckKind,
    pub skip: SkipMode,
    pub input_window: usize,
    pub input_shape: [usize; 3],
    pub seed: u64,
}

impl Default for HRTMConfig {
    fn default() -> Self {
        HRTMConfig {
            num_layers: 2,
            base_channels: [32, 64, 128],
            dropout: 0.2,
            bottleneck: BottleneckKind::Conv,
            skip: SkipMode::Additive,
            input_window: 5,
            input_shape: [32, 128, 128],
            seed: 0x4854,
        }
    }
}

impl HRTMConfig {
    pub fn enc_channels(&self) -> [usize; 3] {
        [
            self.num_layers * self.base_channels[0],
            self.num_layers * self.base_channels[1],
            self.num_layers * self.base_channels[2],
        ]
    }
}

pub struct HrtmModel {
    pub config: HRTMConfig,
    pub(crate) core: TemporalUnet,
}

impl HrtmModel {
    pub fn build(config: HRTMConfig) -> Result<(Self, BuildReport), NnError> {
        let (core, report) = TemporalUnet::build(
            config.input_window,
            config.input_shape,
            config.enc_channels(),
            config.dropout,
            config.bottleneck,
            config.skip,
            config.seed,
        )?;
        log::info!(
            "HRTM built with num_layers={}: {} parameters (reference {});\n{}",
            config.num_layers,
            report.param_count,
            HRTM_REFERENCE_PARAM_COUNT,
            report.render()
        );
        Ok((HrtmModel { config, core }, report))
    }

    pub fn param_count(&mut self) -> usize {
        self.core.params_mut().iter().map(|p| p.len()).sum()
    }

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
}

impl BatchModel for HrtmModel {
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
