//! Shared encoder/bottleneck/decoder core for the temporal models.
//!
//! Three encoder blocks (3^3 conv, batch norm, ReLU, 2^3 max pool, channel
//! dropout), a bottleneck (plain convolution by default, or a ConvLSTM over
//! the window frames), and three transposed-conv decoder blocks with
//! additive skips from the pooled encoder features. The TM and the HRTM
//! differ only in channel widths and input resolution.

use ndarray::{Array5, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use plume_nn::convlstm::ConvLstm3d;
use plume_nn::layers::{ActLayer, Activation, BatchNorm3d, Conv3d, ConvTranspose3d, Dropout3d, MaxPool3d};
use plume_nn::{NnError, Param};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BottleneckKind {
    Conv,
    ConvLstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    None,
    Additive,
}

/// Construction report: per-stage output shapes and the parameter count.
#[derive(Debug, Clone)]
pub struct BuildReport {
    pub stages: Vec<(String, usize, [usize; 3])>,
    pub param_count: usize,
}

impl BuildReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (name, c, [d, h, w]) in &self.stages {
            s.push_str(&format!("{name}: ({c}, {d}, {h}, {w})\n"));
        }
        s.push_str(&format!("trainable parameters: {}", self.param_count));
        s
    }
}

struct EncBlock {
    conv: Conv3d,
    bn: BatchNorm3d,
    pool: MaxPool3d,
    drop: Dropout3d,
}

struct DecBlock {
    deconv: ConvTranspose3d,
    bn: BatchNorm3d,
    drop: Dropout3d,
}

enum Bottleneck {
    Conv(Conv3d),
    Lstm(ConvLstm3d),
}

pub(crate) struct TemporalUnet {
    window: usize,
    skip: SkipMode,
    enc: [EncBlock; 3],
    bottleneck: Bottleneck,
    dec1: DecBlock,
    dec2: DecBlock,
    dec3: ConvTranspose3d,
    out_act: ActLayer,
    // Skip-path activations captured during the training forward.
    skip_cache: Option<(Array5<f32>, Array5<f32>)>,
}

/// Validates the pooling chain: every pool halves each axis exactly.
fn audit_shapes(
    window: usize,
    input_shape: [usize; 3],
    channels: [usize; 3],
) -> Result<Vec<(String, usize, [usize; 3])>, NnError> {
    if window == 0 {
        return Err(NnError::construction("input", "window must be at least 1"));
    }
    let mut stages = Vec::new();
    let mut shape = input_shape;
    stages.push(("input".to_string(), window, shape));
    for (i, &c) in channels.iter().enumerate() {
        let stage = format!("enc{}", i + 1);
        for (axis, s) in shape.iter_mut().enumerate() {
            if *s % 2 != 0 || *s == 0 {
                return Err(NnError::construction(
                    &stage,
                    format!("axis {axis} size {s} not divisible by the 2^3 pool"),
                ));
            }
            *s /= 2;
        }
        stages.push((stage, c, shape));
    }
    stages.push(("bottleneck".to_string(), channels[2], shape));
    for (i, &c) in [channels[1], channels[0], 1].iter().enumerate() {
        for s in shape.iter_mut() {
            *s *= 2;
        }
        stages.push((format!("dec{}", i + 1), c, shape));
    }
    if shape != input_shape {
        return Err(NnError::construction(
            "dec3",
            format!("decoder restores {shape:?}, expected {input_shape:?}"),
        ));
    }
    Ok(stages)
}

impl TemporalUnet {
    pub(crate) fn build(
        window: usize,
        input_shape: [usize; 3],
        channels: [usize; 3],
        dropout: f64,
        bottleneck: BottleneckKind,
        skip: SkipMode,
        seed: u64,
    ) -> Result<(Self, BuildReport), NnError> {
        let stages = audit_shapes(window, input_shape, channels)?;
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c1, c2, c3] = channels;
        // ConvLSTM mode encodes each frame separately with shared weights.
        let in_ch = match bottleneck {
            BottleneckKind::Conv => window,
            BottleneckKind::ConvLstm => 1,
        };
        let enc = [
            EncBlock {
                conv: Conv3d::new("enc1", in_ch, c1, [3; 3], [1; 3], [1; 3], &mut rng),
                bn: BatchNorm3d::new("bn1", c1, Activation::Relu),
                pool: MaxPool3d::new([2; 3]),
                drop: Dropout3d::new(dropout),
            },
            EncBlock {
                conv: Conv3d::new("enc2", c1, c2, [3; 3], [1; 3], [1; 3], &mut rng),
                bn: BatchNorm3d::new("bn2", c2, Activation::Relu),
                pool: MaxPool3d::new([2; 3]),
                drop: Dropout3d::new(dropout),
            },
            EncBlock {
                conv: Conv3d::new("enc3", c2, c3, [3; 3], [1; 3], [1; 3], &mut rng),
                bn: BatchNorm3d::new("bn3", c3, Activation::Relu),
                pool: MaxPool3d::new([2; 3]),
                drop: Dropout3d::new(dropout),
            },
        ];
        let bottleneck = match bottleneck {
            BottleneckKind::Conv => {
                Bottleneck::Conv(Conv3d::new("bott", c3, c3, [3; 3], [1; 3], [1; 3], &mut rng))
            }
            BottleneckKind::ConvLstm => Bottleneck::Lstm(ConvLstm3d::new("bott", c3, c3, &mut rng)),
        };
        let dec1 = DecBlock {
            deconv: ConvTranspose3d::new("dec1", c3, c2, [2; 3], [2; 3], [0; 3], [0; 3], &mut rng),
            bn: BatchNorm3d::new("bn_d1", c2, Activation::Relu),
            drop: Dropout3d::new(dropout),
        };
        let dec2 = DecBlock {
            deconv: ConvTranspose3d::new("dec2", c2, c1, [2; 3], [2; 3], [0; 3], [0; 3], &mut rng),
            bn: BatchNorm3d::new("bn_d2", c1, Activation::Relu),
            drop: Dropout3d::new(dropout),
        };
        let dec3 = ConvTranspose3d::new("dec3", c1, 1, [2; 3], [2; 3], [0; 3], [0; 3], &mut rng);

        let mut net = TemporalUnet {
            window,
            skip,
            enc,
            bottleneck,
            dec1,
            dec2,
            dec3,
            out_act: ActLayer::new(Activation::Relu),
            skip_cache: None,
        };
        let param_count = net.params_mut().iter().map(|p| p.len()).sum();
        Ok((
            net,
            BuildReport {
                stages,
                param_count,
            },
        ))
    }

    fn is_lstm(&self) -> bool {
        matches!(self.bottleneck, Bottleneck::Lstm(_))
    }

    /// In ConvLSTM mode the window axis folds into the batch for the shared
    /// per-frame encoder.
    fn fold_window(&self, x: Array5<f32>) -> Array5<f32> {
        let (b, w, d, h, wd) = x.dim();
        x.into_shape_with_order((b * w, 1, d, h, wd))
            .expect("window fold")
    }

    fn last_frames(&self, stacked: &Array5<f32>) -> Array5<f32> {
        // Rows b*window + (window-1).
        let (bw, c, d, h, w) = stacked.dim();
        let b = bw / self.window;
        let mut out = Array5::<f32>::zeros((b, c, d, h, w));
        for bi in 0..b {
            out.index_axis_mut(Axis(0), bi)
                .assign(&stacked.index_axis(Axis(0), bi * self.window + self.window - 1));
        }
        out
    }

    fn scatter_last_frames(&self, dx: &Array5<f32>, bw: usize) -> Array5<f32> {
        let (b, c, d, h, w) = dx.dim();
        let mut out = Array5::<f32>::zeros((bw, c, d, h, w));
        for bi in 0..b {
            out.index_axis_mut(Axis(0), bi * self.window + self.window - 1)
                .assign(&dx.index_axis(Axis(0), bi));
        }
        out
    }

    pub(crate) fn forward_train(&mut self, x: Array5<f32>, rng: &mut ChaCha8Rng) -> Array5<f32> {
        let batch = x.dim().0;
        let h = if self.is_lstm() { self.fold_window(x) } else { x };

        let h = self.enc[0].conv.forward_t(h);
        let h = self.enc[0].bn.forward_t(h);
        let h = self.enc[0].pool.forward_t(h);
        let s1 = self.enc[0].drop.forward_t(h, rng);

        let h = self.enc[1].conv.forward_t(s1.clone());
        let h = self.enc[1].bn.forward_t(h);
        let h = self.enc[1].pool.forward_t(h);
        let s2 = self.enc[1].drop.forward_t(h, rng);

        let h = self.enc[2].conv.forward_t(s2.clone());
        let h = self.enc[2].bn.forward_t(h);
        let h = self.enc[2].pool.forward_t(h);
        let e3 = self.enc[2].drop.forward_t(h, rng);

        let (z, s1, s2) = match &mut self.bottleneck {
            Bottleneck::Conv(conv) => (conv.forward_t(e3), s1, s2),
            Bottleneck::Lstm(cell) => {
                let frames: Vec<Array5<f32>> = (0..self.window)
                    .map(|t| {
                        let (bw, c, d, hh, ww) = e3.dim();
                        let b = bw / self.window;
                        let mut f = Array5::<f32>::zeros((b, c, d, hh, ww));
                        for bi in 0..b {
                            f.index_axis_mut(Axis(0), bi)
                                .assign(&e3.index_axis(Axis(0), bi * self.window + t));
                        }
                        f
                    })
                    .collect();
                let z = cell.forward_t(frames);
                // Skips come from the last frame's encoder features.
                (z, self.last_frames(&s1), self.last_frames(&s2))
            }
        };

        let h = self.dec1.deconv.forward_t(z);
        let h = self.dec1.bn.forward_t(h);
        let mut h = self.dec1.drop.forward_t(h, rng);
        if self.skip == SkipMode::Additive {
            h += &s2;
        }

        let hh = self.dec2.deconv.forward_t(h);
        let hh = self.dec2.bn.forward_t(hh);
        let mut hh = self.dec2.drop.forward_t(hh, rng);
        if self.skip == SkipMode::Additive {
            hh += &s1;
        }

        if self.is_lstm() || self.skip == SkipMode::Additive {
            self.skip_cache = Some((s1, s2));
        } else {
            self.skip_cache = None;
        }
        let _ = batch;

        let y = self.dec3.forward_t(hh);
        self.out_act.forward_t(y)
    }

    pub(crate) fn backward(&mut self, dy: &Array5<f32>) {
        let g = self.out_act.backward(dy);
        let g = self.dec3.backward(&g);

        // Skip gradient at dec2 output.
        let gs1 = if self.skip == SkipMode::Additive {
            Some(g.clone())
        } else {
            None
        };
        let g = self.dec2.drop.backward(&g);
        let g = self.dec2.bn.backward(&g);
        let g = self.dec2.deconv.backward(&g);

        let gs2 = if self.skip == SkipMode::Additive {
            Some(g.clone())
        } else {
            None
        };
        let g = self.dec1.drop.backward(&g);
        let g = self.dec1.bn.backward(&g);
        let gz = self.dec1.deconv.backward(&g);

        let d_e3 = match &mut self.bottleneck {
            Bottleneck::Conv(conv) => conv.backward(&gz),
            Bottleneck::Lstm(cell) => {
                let dxs = cell.backward(&gz);
                // Re-interleave per-step gradients onto the folded batch.
                let (b, c, d, hh, ww) = dxs[0].dim();
                let mut out = Array5::<f32>::zeros((b * self.window, c, d, hh, ww));
                for (t, dx) in dxs.iter().enumerate() {
                    for bi in 0..b {
                        out.index_axis_mut(Axis(0), bi * self.window + t)
                            .assign(&dx.index_axis(Axis(0), bi));
                    }
                }
                out
            }
        };

        let g = self.enc[2].drop.backward(&d_e3);
        let g = self.enc[2].pool.backward(&g);
        let g = self.enc[2].bn.backward(&g);
        let mut g = self.enc[2].conv.backward(&g);

        if let Some(gs2) = gs2 {
            let gs2 = if self.is_lstm() {
                self.scatter_last_frames(&gs2, g.dim().0)
            } else {
                gs2
            };
            g += &gs2;
        }
        let g = self.enc[1].drop.backward(&g);
        let g = self.enc[1].pool.backward(&g);
        let g = self.enc[1].bn.backward(&g);
        let mut g = self.enc[1].conv.backward(&g);

        if let Some(gs1) = gs1 {
            let gs1 = if self.is_lstm() {
                self.scatter_last_frames(&gs1, g.dim().0)
            } else {
                gs1
            };
            g += &gs1;
        }
        let g = self.enc[0].drop.backward(&g);
        let g = self.enc[0].pool.backward(&g);
        let g = self.enc[0].bn.backward(&g);
        let _ = self.enc[0].conv.backward(&g);
        self.skip_cache = None;
    }

    pub(crate) fn infer(&self, x: &Array5<f32>) -> Array5<f32> {
        let folded;
        let h: &Array5<f32> = if self.is_lstm() {
            folded = self.fold_window(x.clone());
            &folded
        } else {
            x
        };

        let h = self.enc[0].conv.infer(h);
        let h = self.enc[0].bn.infer(&h);
        let s1 = self.enc[0].pool.infer(&h);

        let h = self.enc[1].conv.infer(&s1);
        let h = self.enc[1].bn.infer(&h);
        let s2 = self.enc[1].pool.infer(&h);

        let h = self.enc[2].conv.infer(&s2);
        let h = self.enc[2].bn.infer(&h);
        let e3 = self.enc[2].pool.infer(&h);

        let (z, s1, s2) = match &self.bottleneck {
            Bottleneck::Conv(conv) => (conv.infer(&e3), s1, s2),
            Bottleneck::Lstm(cell) => {
                let (bw, c, d, hh, ww) = e3.dim();
                let b = bw / self.window;
                let frames: Vec<Array5<f32>> = (0..self.window)
                    .map(|t| {
                        let mut f = Array5::<f32>::zeros((b, c, d, hh, ww));
                        for bi in 0..b {
                            f.index_axis_mut(Axis(0), bi)
                                .assign(&e3.index_axis(Axis(0), bi * self.window + t));
                        }
                        f
                    })
                    .collect();
                (cell.infer(&frames), self.last_frames(&s1), self.last_frames(&s2))
            }
        };

        let h = self.dec1.deconv.infer(&z);
        let mut h = self.dec1.bn.infer(&h);
        if self.skip == SkipMode::Additive {
            h += &s2;
        }
        let hh = self.dec2.deconv.infer(&h);
        let mut hh = self.dec2.bn.infer(&hh);
        if self.skip == SkipMode::Additive {
            hh += &s1;
        }
        let y = self.dec3.infer(&hh);
        self.out_act.infer(&y)
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for block in self.enc.iter_mut() {
            out.extend(block.conv.params_mut());
            out.extend(block.bn.params_mut());
        }
        match &mut self.bottleneck {
            Bottleneck::Conv(c) => out.extend(c.params_mut()),
            Bottleneck::Lstm(l) => out.extend(l.params_mut()),
        }
        out.extend(self.dec1.deconv.params_mut());
        out.extend(self.dec1.bn.params_mut());
        out.extend(self.dec2.deconv.params_mut());
        out.extend(self.dec2.bn.params_mut());
        out.extend(self.dec3.params_mut());
        out
    }

    pub(crate) fn state_blobs(&self) -> Vec<(String, Vec<f32>)> {
        let mut out = Vec::new();
        let mut push_param = |p: &Param| {
            out.push((p.name.clone(), p.value.iter().cloned().collect()));
        };
        for block in self.enc.iter() {
            push_param(&block.conv.w);
            push_param(&block.conv.b);
            push_param(&block.bn.gamma);
            push_param(&block.bn.beta);
        }
        match &self.bottleneck {
            Bottleneck::Conv(c) => {
                push_param(&c.w);
                push_param(&c.b);
            }
            Bottleneck::Lstm(l) => {
                push_param(&l.w_x);
                push_param(&l.w_h);
                push_param(&l.b);
            }
        }
        for dec in [&self.dec1, &self.dec2] {
            push_param(&dec.deconv.w);
            push_param(&dec.deconv.b);
            push_param(&dec.bn.gamma);
            push_param(&dec.bn.beta);
        }
        push_param(&self.dec3.w);
        push_param(&self.dec3.b);
        for (i, block) in self.enc.iter().enumerate() {
            out.push((format!("bn{}.running_mean", i + 1), block.bn.running_mean.clone()));
            out.push((format!("bn{}.running_var", i + 1), block.bn.running_var.clone()));
        }
        out.push(("bn_d1.running_mean".into(), self.dec1.bn.running_mean.clone()));
        out.push(("bn_d1.running_var".into(), self.dec1.bn.running_var.clone()));
        out.push(("bn_d2.running_mean".into(), self.dec2.bn.running_mean.clone()));
        out.push(("bn_d2.running_var".into(), self.dec2.bn.running_var.clone()));
        out
    }

    pub(crate) fn load_state_blobs(
        &mut self,
        lookup: &mut dyn FnMut(&str) -> Option<Vec<f32>>,
    ) -> Result<(), NnError> {
        fn set_param(p: &mut Param, lookup: &mut dyn FnMut(&str) -> Option<Vec<f32>>) -> Result<(), NnError> {
            let data = lookup(&p.name)
                .ok_or_else(|| NnError::Checkpoint(format!("missing blob {}", p.name)))?;
            if data.len() != p.len() {
                return Err(NnError::Checkpoint(format!(
                    "blob {} has {} values, expected {}",
                    p.name,
                    data.len(),
                    p.len()
                )));
            }
            p.value.as_slice_mut().unwrap().copy_from_slice(&data);
            Ok(())
        }
        fn set_vec(
            v: &mut Vec<f32>,
            name: &str,
            lookup: &mut dyn FnMut(&str) -> Option<Vec<f32>>,
        ) -> Result<(), NnError> {
            let data =
                lookup(name).ok_or_else(|| NnError::Checkpoint(format!("missing blob {name}")))?;
            if data.len() != v.len() {
                return Err(NnError::Checkpoint(format!("blob {name} size mismatch")));
            }
            v.copy_from_slice(&data);
            Ok(())
        }

        for block in self.enc.iter_mut() {
            set_param(&mut block.conv.w, lookup)?;
            set_param(&mut block.conv.b, lookup)?;
            set_param(&mut block.bn.gamma, lookup)?;
            set_param(&mut block.bn.beta, lookup)?;
        }
        match &mut self.bottleneck {
            Bottleneck::Conv(c) => {
                set_param(&mut c.w, lookup)?;
                set_param(&mut c.b, lookup)?;
            }
            Bottleneck::Lstm(l) => {
                set_param(&mut l.w_x, lookup)?;
                set_param(&mut l.w_h, lookup)?;
                set_param(&mut l.b, lookup)?;
            }
        }
        set_param(&mut self.dec1.deconv.w, lookup)?;
        set_param(&mut self.dec1.deconv.b, lookup)?;
        set_param(&mut self.dec1.bn.gamma, lookup)?;
        set_param(&mut self.dec1.bn.beta, lookup)?;
        set_param(&mut self.dec2.deconv.w, lookup)?;
        set_param(&mut self.dec2.deconv.b, lookup)?;
        set_param(&mut self.dec2.bn.gamma, lookup)?;
        set_param(&mut self.dec2.bn.beta, lookup)?;
        set_param(&mut self.dec3.w, lookup)?;
        set_param(&mut self.dec3.b, lookup)?;
        for (i, block) in self.enc.iter_mut().enumerate() {
            set_vec(&mut block.bn.running_mean, &format!("bn{}.running_mean", i + 1), lookup)?;
            set_vec(&mut block.bn.running_var, &format!("bn{}.running_var", i + 1), lookup)?;
        }
        set_vec(&mut self.dec1.bn.running_mean, "bn_d1.running_mean", lookup)?;
        set_vec(&mut self.dec1.bn.running_var, "bn_d1.running_var", lookup)?;
        set_vec(&mut self.dec2.bn.running_mean, "bn_d2.running_mean", lookup)?;
        set_vec(&mut self.dec2.bn.running_var, "bn_d2.running_var", lookup)?;
        Ok(())
    }
}
