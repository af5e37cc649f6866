//! Spatial refinement module: a 3D U-Net mapping one low-resolution frame
//! (8, 32, 32) to a high-resolution frame (32, 128, 128).
//!
//! Pools act horizontally only; the decoder's four transposed convolutions
//! compose to the fourfold factor in every axis. The enc1 skip is adjusted
//! 1x1x1 from c1 to c2 channels and added onto the first decoder stage.

use ndarray::{Array4, Array5};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use plume_nn::layers::{ActLayer, Activation, BatchNorm3d, Conv3d, ConvTranspose3d, MaxPool3d};
use plume_nn::{BatchModel, NnError, Param};

use crate::temporal_unet::BuildReport;

/// Published reference parameter count, reproduced exactly by the default
/// widths (64, 128, dec3 32).
pub const SRM_REFERENCE_PARAM_COUNT: usize = 951_873;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SRMConfig {
    pub enc_channels: [usize; 2],
    pub dec3_channels: usize,
    pub negative_slope: f32,
    /// Per-stage pooling kernels (equal strides).
    pub pool_dims: [[usize; 3]; 2],
    /// Per-stage transposed-conv strides; must compose with the pools to map
    /// `input_shape` onto `output_shape`.
    pub up_strides: [[usize; 3]; 4],
    pub input_shape: [usize; 3],
    pub output_shape: [usize; 3],
    pub seed: u64,
}

impl Default for SRMConfig {
    fn default() -> Self {
        SRMConfig {
            enc_channels: [64, 128],
            dec3_channels: 32,
            negative_slope: 0.01,
            pool_dims: [[1, 2, 2], [1, 2, 2]],
            up_strides: [[1, 2, 2], [2, 2, 2], [2, 2, 2], [1, 2, 2]],
            input_shape: [8, 32, 32],
            output_shape: [32, 128, 128],
            seed: 0x5352,
        }
    }
}

impl SRMConfig {
    /// Channel widths under the literal "7 x" multiplier reading.
    pub fn sevenfold() -> Self {
        SRMConfig {
            enc_channels: [112, 224],
            dec3_channels: 56,
            ..SRMConfig::default()
        }
    }

    /// Decoder kernels: 3^3 except the last stage, which follows the source
    /// layer table with a (1, 3, 3) kernel.
    fn dec_kernel(&self, stage: usize) -> [usize; 3] {
        if stage == 3 {
            [1, 3, 3]
        } else {
            [3, 3, 3]
        }
    }

    fn dec_pad(&self, stage: usize) -> [usize; 3] {
        let k = self.dec_kernel(stage);
        [k[0] / 2, k[1] / 2, k[2] / 2]
    }

    fn dec_out_pad(&self, stage: usize) -> [usize; 3] {
        let s = self.up_strides[stage];
        [s[0] - 1, s[1] - 1, s[2] - 1]
    }
}

pub struct RefinementModel {
    pub config: SRMConfig,
    conv1: Conv3d,
    bn1: BatchNorm3d,
    pool1: MaxPool3d,
    conv2: Conv3d,
    bn2: BatchNorm3d,
    pool2: MaxPool3d,
    adjust: Conv3d,
    bn_adj: BatchNorm3d,
    dec: [ConvTranspose3d; 4],
    dec_bn: [BatchNorm3d; 3],
    out_act: ActLayer,
    skip_cache: Option<()>,
}

/// Walks the stage shapes; fails loudly with the full per-stage listing when
/// the composition does not reach the output shape.
fn audit(config: &SRMConfig) -> Result<Vec<(String, usize, [usize; 3])>, NnError> {
    let [c1, c2] = config.enc_channels;
    let mut stages: Vec<(String, usize, [usize; 3])> = Vec::new();
    let mut shape = config.input_shape;
    stages.push(("input".into(), 1, shape));
    stages.push(("enc1".into(), c1, shape));
    for (i, pool) in config.pool_dims.iter().enumerate() {
        for d in 0..3 {
            if pool[d] == 0 || shape[d] % pool[d] != 0 {
                return Err(NnError::construction(
                    format!("pool{}", i + 1),
                    format!("shape {shape:?} not divisible by pool {pool:?}"),
                ));
            }
            shape[d] /= pool[d];
        }
        stages.push((format!("pool{}", i + 1), if i == 0 { c1 } else { c2 }, shape));
        if i == 0 {
            stages.push(("enc2".into(), c2, shape));
        }
    }
    let chans = [c2, c1, config.dec3_channels, 1];
    let mut skip_shape = None;
    for stage in 0..4 {
        let k = config.dec_kernel(stage);
        let s = config.up_strides[stage];
        let p = config.dec_pad(stage);
        let op = config.dec_out_pad(stage);
        for d in 0..3 {
            if k[d] < s[d] {
                return Err(NnError::construction(
                    format!("dec{}", stage + 1),
                    format!("kernel {k:?} smaller than stride {s:?} leaves output gaps"),
                ));
            }
            shape[d] = (shape[d] - 1) * s[d] + k[d] + op[d] - 2 * p[d];
        }
        stages.push((format!("dec{}", stage + 1), chans[stage], shape));
        if stage == 0 {
            skip_shape = Some(shape);
        }
    }
    let listing = || -> String {
        stages
            .iter()
            .map(|(n, c, s)| format!("{n}: ({c}, {}, {}, {})", s[0], s[1], s[2]))
            .collect::<Vec<_>>()
            .join("; ")
    };
    // The adjusted enc1 skip fuses with dec1, which therefore must match the
    // pool1 resolution.
    let pool1_shape = stages
        .iter()
        .find(|(n, _, _)| n == "pool1")
        .map(|&(_, _, s)| s)
        .unwrap();
    if skip_shape != Some(pool1_shape) {
        return Err(NnError::construction(
            "dec1",
            format!(
                "skip fusion shape {skip_shape:?} vs pool1 {pool1_shape:?}; stages: {}",
                listing()
            ),
        ));
    }
    if shape != config.output_shape {
        return Err(NnError::construction(
            "dec4",
            format!(
                "decoder reaches {shape:?}, expected {:?}; stages: {}",
                config.output_shape,
                listing()
            ),
        ));
    }
    Ok(stages)
}

impl RefinementModel {
    pub fn build(config: SRMConfig) -> Result<(Self, BuildReport), NnError> {
        let stages = audit(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let [c1, c2] = config.enc_channels;
        let act = Activation::LeakyRelu(config.negative_slope);

        let conv1 = Conv3d::new("enc1", 1, c1, [3; 3], [1; 3], [1; 3], &mut rng);
        let bn1 = BatchNorm3d::new("bn1", c1, act);
        let pool1 = MaxPool3d::new(config.pool_dims[0]);
        let conv2 = Conv3d::new("enc2", c1, c2, [3; 3], [1; 3], [1; 3], &mut rng);
        let bn2 = BatchNorm3d::new("bn2", c2, act);
        let pool2 = MaxPool3d::new(config.pool_dims[1]);
        let adjust = Conv3d::new("adjust", c1, c2, [1; 3], [1; 3], [0; 3], &mut rng);
        let bn_adj = BatchNorm3d::new("bn_adj", c2, act);

        let chans_in = [c2, c2, c1, config.dec3_channels];
        let chans_out = [c2, c1, config.dec3_channels, 1];
        let mut dec_vec = Vec::new();
        for stage in 0..4 {
            dec_vec.push(ConvTranspose3d::new(
                &format!("dec{}", stage + 1),
                chans_in[stage],
                chans_out[stage],
                config.dec_kernel(stage),
                config.up_strides[stage],
                config.dec_pad(stage),
                config.dec_out_pad(stage),
                &mut rng,
            ));
        }
        let dec: [ConvTranspose3d; 4] = dec_vec.try_into().map_err(|_| {
            NnError::construction("decoder", "stage collection")
        })?;
        let dec_bn = [
            BatchNorm3d::new("bn_d1", c2, act),
            BatchNorm3d::new("bn_d2", c1, act),
            BatchNorm3d::new("bn_d3", config.dec3_channels, act),
        ];

        let mut model = RefinementModel {
            config,
            conv1,
            bn1,
            pool1,
            conv2,
            bn2,
            pool2,
            adjust,
            bn_adj,
            dec,
            dec_bn,
            out_act: ActLayer::new(act),
            skip_cache: None,
        };
        let param_count = model.params_mut().iter().map(|p| p.len()).sum();
        let report = BuildReport {
            stages,
            param_count,
        };
        log::info!(
            "SRM built: {} parameters (reference {});\n{}",
            report.param_count,
            SRM_REFERENCE_PARAM_COUNT,
            report.render()
        );
        Ok((model, report))
    }

    pub fn param_count(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.len()).sum()
    }

    /// Super-resolves a batch of frames `(B, z, y, x) -> (B, Z, Y, X)`.
    pub fn super_resolve(&self, frames: &Array4<f32>) -> Result<Array4<f32>, NnError> {
        let [z, y, x] = self.config.input_shape;
        let s = frames.shape();
        if s.len() != 4 || s[1..] != [z, y, x] {
            return Err(NnError::invalid(format!(
                "input shape {s:?}, expected (B, {z}, {y}, {x})"
            )));
        }
        let b = s[0];
        let x5 = frames
            .clone()
            .into_shape_with_order((b, 1, z, y, x))
            .expect("channel reshape");
        let y5 = self.infer_batch(&x5);
        let [oz, oy, ox] = self.config.output_shape;
        Ok(y5
            .into_shape_with_order((b, oz, oy, ox))
            .expect("squeeze reshape"))
    }
}

impl BatchModel for RefinementModel {
    fn forward_train(&mut self, x: Array5<f32>, _rng: &mut ChaCha8Rng) -> Array5<f32> {
        let e1 = self.bn1.forward_t(self.conv1.forward_t(x));
        let p1 = self.pool1.forward_t(e1);
        let e2 = self.bn2.forward_t(self.conv2.forward_t(p1.clone()));
        let p2 = self.pool2.forward_t(e2);
        let skip = self.bn_adj.forward_t(self.adjust.forward_t(p1));

        let mut d1 = self.dec_bn[0].forward_t(self.dec[0].forward_t(p2));
        d1 += &skip;
        self.skip_cache = Some(());
        let d2 = self.dec_bn[1].forward_t(self.dec[1].forward_t(d1));
        let d3 = self.dec_bn[2].forward_t(self.dec[2].forward_t(d2));
        self.out_act.forward_t(self.dec[3].forward_t(d3))
    }

    fn backward(&mut self, dy: &Array5<f32>) {
        let g = self.out_act.backward(dy);
        let g = self.dec[3].backward(&g);
        let g = self.dec_bn[2].backward(&g);
        let g = self.dec[2].backward(&g);
        let g = self.dec_bn[1].backward(&g);
        let g = self.dec[1].backward(&g);

        // d1 was the sum of the decoder path and the adjusted skip.
        let g_skip = g.clone();
        let g = self.dec_bn[0].backward(&g);
        let g_p2 = self.dec[0].backward(&g);

        let gs = self.bn_adj.backward(&g_skip);
        let g_p1_skip = self.adjust.backward(&gs);

        let g = self.pool2.backward(&g_p2);
        let g = self.bn2.backward(&g);
        let mut g_p1 = self.conv2.backward(&g);
        g_p1 += &g_p1_skip;

        let g = self.pool1.backward(&g_p1);
        let g = self.bn1.backward(&g);
        let _ = self.conv1.backward(&g);
        self.skip_cache = None;
    }

    fn infer_batch(&self, x: &Array5<f32>) -> Array5<f32> {
        let e1 = self.bn1.infer(&self.conv1.infer(x));
        let p1 = self.pool1.infer(&e1);
        let e2 = self.bn2.infer(&self.conv2.infer(&p1));
        let p2 = self.pool2.infer(&e2);
        let skip = self.bn_adj.infer(&self.adjust.infer(&p1));
        let mut d1 = self.dec_bn[0].infer(&self.dec[0].infer(&p2));
        d1 += &skip;
        let d2 = self.dec_bn[1].infer(&self.dec[1].infer(&d1));
        let d3 = self.dec_bn[2].infer(&self.dec[2].infer(&d2));
        self.out_act.infer(&self.dec[3].infer(&d3))
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        out.extend(self.conv1.params_mut());
        out.extend(self.bn1.params_mut());
        out.extend(self.conv2.params_mut());
        out.extend(self.bn2.params_mut());
        out.extend(self.adjust.params_mut());
        out.extend(self.bn_adj.params_mut());
        for d in self.dec.iter_mut() {
            out.extend(d.params_mut());
        }
        for bn in self.dec_bn.iter_mut() {
            out.extend(bn.params_mut());
        }
        out
    }

    fn state_blobs(&self) -> Vec<(String, Vec<f32>)> {
        let mut out = Vec::new();
        let mut push = |p: &Param| out.push((p.name.clone(), p.value.iter().cloned().collect()));
        push(&self.conv1.w);
        push(&self.conv1.b);
        push(&self.bn1.gamma);
        push(&self.bn1.beta);
        push(&self.conv2.w);
        push(&self.conv2.b);
        push(&self.bn2.gamma);
        push(&self.bn2.beta);
        push(&self.adjust.w);
        push(&self.adjust.b);
        push(&self.bn_adj.gamma);
        push(&self.bn_adj.beta);
        for d in self.dec.iter() {
            push(&d.w);
            push(&d.b);
        }
        for bn in self.dec_bn.iter() {
            push(&bn.gamma);
            push(&bn.beta);
        }
        for (name, bn) in [
            ("bn1", &self.bn1),
            ("bn2", &self.bn2),
            ("bn_adj", &self.bn_adj),
            ("bn_d1", &self.dec_bn[0]),
            ("bn_d2", &self.dec_bn[1]),
            ("bn_d3", &self.dec_bn[2]),
        ] {
            out.push((format!("{name}.running_mean"), bn.running_mean.clone()));
            out.push((format!("{name}.running_var"), bn.running_var.clone()));
        }
        out
    }

    fn load_state_blobs(
        &mut self,
        lookup: &mut dyn FnMut(&str) -> Option<Vec<f32>>,
    ) -> Result<(), NnError> {
        fn set_param(
            p: &mut Param,
            lookup: &mut dyn FnMut(&str) -> Option<Vec<f32>>,
        ) -> Result<(), NnError> {
            let data = lookup(&p.name)
                .ok_or_else(|| NnError::Checkpoint(format!("missing blob {}", p.name)))?;
            if data.len() != p.len() {
                return Err(NnError::Checkpoint(format!("blob {} size mismatch", p.name)));
            }
            p.value.as_slice_mut().unwrap().copy_from_slice(&data);
            Ok(())
        }
        set_param(&mut self.conv1.w, lookup)?;
        set_param(&mut self.conv1.b, lookup)?;
        set_param(&mut self.bn1.gamma, lookup)?;
        set_param(&mut self.bn1.beta, lookup)?;
        set_param(&mut self.conv2.w, lookup)?;
        set_param(&mut self.conv2.b, lookup)?;
        set_param(&mut self.bn2.gamma, lookup)?;
        set_param(&mut self.bn2.beta, lookup)?;
        set_param(&mut self.adjust.w, lookup)?;
        set_param(&mut self.adjust.b, lookup)?;
        set_param(&mut self.bn_adj.gamma, lookup)?;
        set_param(&mut self.bn_adj.beta, lookup)?;
        for d in self.dec.iter_mut() {
            set_param(&mut d.w, lookup)?;
            set_param(&mut d.b, lookup)?;
        }
        for bn in self.dec_bn.iter_mut() {
            set_param(&mut bn.gamma, lookup)?;
            set_param(&mut bn.beta, lookup)?;
        }
        for (name, bn) in [
            ("bn1", &mut self.bn1),
            ("bn2", &mut self.bn2),
            ("bn_adj", &mut self.bn_adj),
        ] {
            let rm = lookup(&format!("{name}.running_mean"))
                .ok_or_else(|| NnError::Checkpoint(format!("missing {name}.running_mean")))?;
            let rv = lookup(&format!("{name}.running_var"))
                .ok_or_else(|| NnError::Checkpoint(format!("missing {name}.running_var")))?;
            bn.running_mean.copy_from_slice(&rm);
            bn.running_var.copy_from_slice(&rv);
        }
        for (i, name) in ["bn_d1", "bn_d2", "bn_d3"].iter().enumerate() {
            let rm = lookup(&format!("{name}.running_mean"))
                .ok_or_else(|| NnError::Checkpoint(format!("missing {name}.running_mean")))?;
            let rv = lookup(&format!("{name}.running_var"))
                .ok_or_else(|| NnError::Checkpoint(format!("missing {name}.running_var")))?;
            self.dec_bn[i].running_mean.copy_from_slice(&rm);
            self.dec_bn[i].running_var.copy_from_slice(&rv);
        }
        Ok(())
    }
}
