//! Layers used by the plume models. Each layer has a caching training
//! forward (`forward_t`), a cache-free immutable inference path (`infer`),
//! and a `backward` that accumulates parameter gradients and returns the
//! input gradient.

use ndarray::{Array2, Array5};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::conv::{conv_forward, conv_grad_weights, flip_weights, sum_per_channel, ConvGeom};
use crate::param::Param;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Linear,
    Relu,
    LeakyRelu(f32),
}

impl Activation {
    /// NaN-propagating forms: `max`/branches would silently map NaN to 0 and
    /// mask numerical blow-ups from the trainer's non-finite-loss guard.
    #[inline]
    fn apply(&self, v: f32) -> f32 {
        match self {
            Activation::Linear => v,
            Activation::Relu => 0.5 * (v + v.abs()),
            Activation::LeakyRelu(s) => 0.5 * ((1.0 + s) * v + (1.0 - s) * v.abs()),
        }
    }

    /// Derivative expressed through the pre-activation value.
    #[inline]
    fn grad_from_pre(&self, pre: f32) -> f32 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(s) => {
                if pre > 0.0 {
                    1.0
                } else {
                    *s
                }
            }
        }
    }
}

pub(crate) fn w_as_matrix(w: &Param, rows: usize) -> Array2<f32> {
    let n = w.value.len();
    Array2::from_shape_vec((rows, n / rows), w.value.iter().cloned().collect())
        .expect("weight reshape")
}

// ---------------------------------------------------------------------------
// Conv3d
// ---------------------------------------------------------------------------

/// 3D convolution, stride 1..n, symmetric zero padding.
pub struct Conv3d {
    pub w: Param, // (Cout, Cin, kd, kh, kw)
    pub b: Param, // (Cout,)
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    cache_x: Option<Array5<f32>>,
}

impl Conv3d {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let kvol: usize = kernel.iter().product();
        let fan_in = cin * kvol;
        Conv3d {
            w: Param::uniform_fan_in(
                format!("{name}.w"),
                &[cout, cin, kernel[0], kernel[1], kernel[2]],
                fan_in,
                rng,
            ),
            b: Param::uniform_fan_in(format!("{name}.b"), &[cout], fan_in, rng),
            kernel,
            stride,
            pad,
            cache_x: None,
        }
    }

    pub fn cout(&self) -> usize {
        self.w.value.shape()[0]
    }

    fn geom(&self, in_dhw: [usize; 3]) -> ConvGeom {
        ConvGeom::simple(in_dhw, self.kernel, self.stride, self.pad)
    }

    pub fn out_shape(&self, in_dhw: [usize; 3]) -> [usize; 3] {
        self.geom(in_dhw).out_dhw()
    }

    fn run(&self, x: &Array5<f32>) -> Array5<f32> {
        let (_, _, d, h, w) = x.dim();
        let geom = self.geom([d, h, w]);
        let w2 = w_as_matrix(&self.w, self.cout());
        conv_forward(x, &w2, self.b.value.as_slice(), &geom)
    }

    pub fn forward_t(&mut self, x: Array5<f32>) -> Array5<f32> {
        let y = self.run(&x);
        self.cache_x = Some(x);
        y
    }

    pub fn infer(&self, x: &Array5<f32>) -> Array5<f32> {
        self.run(x)
    }

    pub fn backward(&mut self, dy: &Array5<f32>) -> Array5<f32> {
        let x = self.cache_x.take().expect("backward without forward");
        let (_, _, d, h, w) = x.dim();
        let geom = self.geom([d, h, w]);

        let dw = conv_grad_weights(dy, &x, &geom);
        let gw = self.w.grad.as_slice_mut().expect("grad slice");
        for (g, v) in gw.iter_mut().zip(dw.iter()) {
            *g += v;
        }
        let db = sum_per_channel(dy);
        let gb = self.b.grad.as_slice_mut().expect("grad slice");
        for (g, v) in gb.iter_mut().zip(db.iter()) {
            *g += v;
        }

        let w5 = self
            .w
            .value
            .view()
            .into_dimensionality::<ndarray::Ix5>()
            .expect("conv weight is 5d");
        let wf = flip_weights(&w5.to_owned());
        conv_forward(dy, &wf, None, &geom.flipped())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

// ---------------------------------------------------------------------------
// ConvTranspose3d
// ---------------------------------------------------------------------------

struct Phase {
    geom: ConvGeom,
    w2: Array2<f32>,
    o_start: [usize; 3],
    n_out: [usize; 3],
}

/// Transposed 3D convolution with per-axis kernel/stride/padding and output
/// padding, evaluated as disjoint per-phase stride-1 convolutions.
pub struct ConvTranspose3d {
    pub w: Param, // (Cin, Cout, kd, kh, kw)
    pub b: Param, // (Cout,)
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub out_pad: [usize; 3],
    cache_x: Option<Array5<f32>>,
}

impl ConvTranspose3d {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
        out_pad: [usize; 3],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let kvol: usize = kernel.iter().product();
        let svol: usize = stride.iter().product();
        let fan_in = (cin * kvol / svol).max(1);
        ConvTranspose3d {
            w: Param::uniform_fan_in(
                format!("{name}.w"),
                &[cin, cout, kernel[0], kernel[1], kernel[2]],
                fan_in,
                rng,
            ),
            b: Param::uniform_fan_in(format!("{name}.b"), &[cout], fan_in, rng),
            kernel,
            stride,
            pad,
            out_pad,
            cache_x: None,
        }
    }

    pub fn cin(&self) -> usize {
        self.w.value.shape()[0]
    }

    pub fn cout(&self) -> usize {
        self.w.value.shape()[1]
    }

    pub fn out_shape(&self, in_dhw: [usize; 3]) -> [usize; 3] {
        let mut out = [0usize; 3];
        for d in 0..3 {
            out[d] = (in_dhw[d] - 1) * self.stride[d] + self.kernel[d] + self.out_pad[d]
                - 2 * self.pad[d];
        }
        out
    }

    /// Enumerates phases: output positions congruent to one residue per axis.
    fn phases(&self, in_dhw: [usize; 3]) -> Vec<Phase> {
        let w5 = self
            .w
            .value
            .view()
            .into_dimensionality::<ndarray::Ix5>()
            .expect("deconv weight is 5d");
        let cin = self.cin();
        let cout = self.cout();
        let out_dhw = self.out_shape(in_dhw);

        struct AxisPhase {
            taps: Vec<usize>, // kernel indices in conv (reversed-tap) order
            o_start: usize,
            n_out: usize,
            pad_lo: isize,
            pad_hi: isize,
        }
        // ceil(a/b) for b > 0.
        let ceil_div = |a: isize, b: isize| -> isize { (a + b - 1).div_euclid(b) };

        let axis_phase = |axis: usize, phi: usize| -> Option<AxisPhase> {
            let k = self.kernel[axis] as isize;
            let s = self.stride[axis] as isize;
            let p = self.pad[axis] as isize;
            let d_in = in_dhw[axis] as isize;
            let d_out = out_dhw[axis] as isize;
            let phi = phi as isize;
            if phi >= k {
                return None;
            }
            let t_count = ceil_div(k - phi, s);
            if t_count <= 0 {
                return None;
            }
            let q_lo = ceil_div(p - phi, s);
            let q_hi = (d_out - 1 + p - phi).div_euclid(s);
            if q_hi < q_lo {
                return None;
            }
            let n_out = (q_hi - q_lo + 1) as usize;
            let o_start = (q_lo * s + phi - p) as usize;
            // Taps in conv order: tap t' reads kernel index phi + (T-1-t')*s.
            let taps: Vec<usize> = (0..t_count)
                .map(|t| (phi + (t_count - 1 - t) * s) as usize)
                .collect();
            let pad_lo = (t_count - 1) - q_lo;
            let pad_hi = q_hi + 1 - d_in;
            Some(AxisPhase {
                taps,
                o_start,
                n_out,
                pad_lo,
                pad_hi,
            })
        };

        let mut phases = Vec::new();
        for pd in 0..self.stride[0] {
            let Some(az) = axis_phase(0, pd) else { continue };
            for ph in 0..self.stride[1] {
                let Some(ay) = axis_phase(1, ph) else { continue };
                for pw in 0..self.stride[2] {
                    let Some(ax) = axis_phase(2, pw) else { continue };
                    let t = [az.taps.len(), ay.taps.len(), ax.taps.len()];
                    let mut w2 = Array2::<f32>::zeros((cout, cin * t[0] * t[1] * t[2]));
                    for co in 0..cout {
                        for ci in 0..cin {
                            for (a, &ka) in az.taps.iter().enumerate() {
                                for (b, &kb) in ay.taps.iter().enumerate() {
                                    for (c, &kc) in ax.taps.iter().enumerate() {
                                        let col = ((ci * t[0] + a) * t[1] + b) * t[2] + c;
                                        w2[(co, col)] = w5[(ci, co, ka, kb, kc)];
                                    }
                                }
                            }
                        }
                    }
                    phases.push(Phase {
                        geom: ConvGeom {
                            in_dhw,
                            kernel: t,
                            stride: [1, 1, 1],
                            pad_lo: [az.pad_lo, ay.pad_lo, ax.pad_lo],
                            pad_hi: [az.pad_hi, ay.pad_hi, ax.pad_hi],
                        },
                        w2,
                        o_start: [az.o_start, ay.o_start, ax.o_start],
                        n_out: [az.n_out, ay.n_out, ax.n_out],
                    });
                }
            }
        }
        phases
    }

    fn run(&self, x: &Array5<f32>) -> Array5<f32> {
        let (batch, cin, d, h, w) = x.dim();
        assert_eq!(cin, self.cin());
        let out_dhw = self.out_shape([d, h, w]);
        let cout = self.cout();
        let bias = self.b.value.as_slice().expect("bias slice");

        let mut y = Array5::<f32>::zeros((batch, cout, out_dhw[0], out_dhw[1], out_dhw[2]));
        // Positions not covered by any phase (possible when k < s) keep bias.
        {
            let ys = y.as_slice_mut().unwrap();
            let n = out_dhw.iter().product::<usize>();
            ys.par_chunks_mut(n).enumerate().for_each(|(i, chunk)| {
                chunk.fill(bias[i % cout]);
            });
        }

        for phase in self.phases([d, h, w]) {
            let yp = conv_forward(x, &phase.w2, Some(bias), &phase.geom);
            debug_assert_eq!(
                [yp.shape()[2], yp.shape()[3], yp.shape()[4]],
                phase.n_out,
                "phase output shape"
            );
            // Disjoint strided scatter, overwrite (bias already included).
            let [sd, sh, sw] = self.stride;
            let [od0, oh0, ow0] = phase.o_start;
            let yps = yp.as_slice().unwrap();
            let np = phase.n_out;
            let n_out_vol = out_dhw.iter().product::<usize>();
            let y_ptr = y.as_mut_ptr() as usize;
            (0..batch * cout).into_par_iter().for_each(|bc| {
                let yb = unsafe { std::slice::from_raw_parts_mut((y_ptr as *mut f32).add(bc * n_out_vol), n_out_vol) };
                let src_base = bc * np[0] * np[1] * np[2];
                for nd in 0..np[0] {
                    let zd = od0 + nd * sd;
                    for nh in 0..np[1] {
                        let zh = oh0 + nh * sh;
                        let dst_row = (zd * out_dhw[1] + zh) * out_dhw[2] + ow0;
                        let src_row = src_base + (nd * np[1] + nh) * np[2];
                        for nw in 0..np[2] {
                            yb[dst_row + nw * sw] = yps[src_row + nw];
                        }
                    }
                }
            });
        }
        y
    }

    /// Geometry that maps deconv-output voxels back onto deconv-input voxels;
    /// used for both the input and the weight gradient.
    fn io_geom(&self, out_dhw: [usize; 3]) -> ConvGeom {
        ConvGeom::simple(out_dhw, self.kernel, self.stride, self.pad)
    }

    pub fn forward_t(&mut self, x: Array5<f32>) -> Array5<f32> {
        let y = self.run(&x);
        self.cache_x = Some(x);
        y
    }

    pub fn infer(&self, x: &Array5<f32>) -> Array5<f32> {
        self.run(x)
    }

    pub fn backward(&mut self, dy: &Array5<f32>) -> Array5<f32> {
        let x = self.cache_x.take().expect("backward without forward");
        let (_, _, yd, yh, yw) = dy.dim();
        let geom = self.io_geom([yd, yh, yw]);
        let (_, _, xd, xh, xw) = x.dim();
        debug_assert_eq!(geom.out_dhw(), [xd, xh, xw]);

        // dW: x contracted against gathers of dy.
        let dw = conv_grad_weights(&x, dy, &geom);
        let gw = self.w.grad.as_slice_mut().expect("grad slice");
        for (g, v) in gw.iter_mut().zip(dw.iter()) {
            *g += v;
        }
        let db = sum_per_channel(dy);
        let gb = self.b.grad.as_slice_mut().expect("grad slice");
        for (g, v) in gb.iter_mut().zip(db.iter()) {
            *g += v;
        }

        // dX: strided convolution of dy with the weight as (Cin, Cout*kvol).
        let cin = self.cin();
        let kvol: usize = self.kernel.iter().product();
        let w2 = w_as_matrix(&self.w, cin);
        debug_assert_eq!(w2.shape()[1], self.cout() * kvol);
        conv_forward(dy, &w2, None, &geom)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

// ---------------------------------------------------------------------------
// BatchNorm3d with fused activation
// ---------------------------------------------------------------------------

struct BnCache {
    xhat: Array5<f32>,
    inv_std: Vec<f64>,
}

/// Batch normalization over (batch, spatial) per channel, with an optional
/// fused activation. Running statistics are f32 so checkpoints round-trip
/// bit-exactly.
pub struct BatchNorm3d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f64,
    pub eps: f64,
    pub act: Activation,
    cache: Option<BnCache>,
}

impl BatchNorm3d {
    pub fn new(name: &str, channels: usize, act: Activation) -> Self {
        let mut gamma = Param::zeros(format!("{name}.gamma"), &[channels]);
        gamma.value.fill(1.0);
        BatchNorm3d {
            gamma,
            beta: Param::zeros(format!("{name}.beta"), &[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
            act,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn forward_t(&mut self, x: Array5<f32>) -> Array5<f32> {
        let (batch, c, d, h, w) = x.dim();
        let n = d * h * w;
        let count = (batch * n) as f64;
        let xs = x.as_slice().expect("contiguous");

        let stats: Vec<(f64, f64)> = (0..c)
            .into_par_iter()
            .map(|ch| {
                // Single pass with four-lane accumulators to break the
                // dependency chain; var from E[x^2] - mean^2 (f64 is ample
                // for normalized activations).
                let mut s = [0.0f64; 4];
                let mut q = [0.0f64; 4];
                for b in 0..batch {
                    let base = (b * c + ch) * n;
                    let sl = &xs[base..base + n];
                    let mut chunks = sl.chunks_exact(4);
                    for ch4 in &mut chunks {
                        for l in 0..4 {
                            let v = ch4[l] as f64;
                            s[l] += v;
                            q[l] += v * v;
                        }
                    }
                    for &v in chunks.remainder() {
                        let v = v as f64;
                        s[0] += v;
                        q[0] += v * v;
                    }
                }
                let sum = s[0] + s[1] + s[2] + s[3];
                let sq = q[0] + q[1] + q[2] + q[3];
                let mean = sum / count;
                let var = (sq / count - mean * mean).max(0.0);
                (mean, var)
            })
            .collect();

        let inv_std: Vec<f64> = stats.iter().map(|&(_, v)| 1.0 / (v + self.eps).sqrt()).collect();
        for ch in 0..c {
            let (mean, var) = stats[ch];
            let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
            self.running_mean[ch] =
                ((1.0 - self.momentum) * self.running_mean[ch] as f64 + self.momentum * mean) as f32;
            self.running_var[ch] =
                ((1.0 - self.momentum) * self.running_var[ch] as f64 + self.momentum * unbiased) as f32;
        }

        let gamma = self.gamma.value.as_slice().unwrap().to_vec();
        let beta = self.beta.value.as_slice().unwrap().to_vec();
        let act = self.act;
        let mut xhat = x;
        let mut y = Array5::<f32>::zeros((batch, c, d, h, w));
        {
            let xh = xhat.as_slice_mut().unwrap();
            let ys = y.as_slice_mut().unwrap();
            xh.par_chunks_mut(n)
                .zip(ys.par_chunks_mut(n))
                .enumerate()
                .for_each(|(i, (xc, yc))| {
                    let ch = i % c;
                    let mean = stats[ch].0 as f32;
                    let istd = inv_std[ch] as f32;
                    let g = gamma[ch];
                    let bt = beta[ch];
                    for (xv, yv) in xc.iter_mut().zip(yc.iter_mut()) {
                        let hat = (*xv - mean) * istd;
                        *xv = hat;
                        *yv = act.apply(g * hat + bt);
                    }
                });
        }
        self.cache = Some(BnCache { xhat, inv_std });
        y
    }

    pub fn infer(&self, x: &Array5<f32>) -> Array5<f32> {
        let (batch, c, d, h, w) = x.dim();
        let n = d * h * w;
        let gamma = self.gamma.value.as_slice().unwrap();
        let beta = self.beta.value.as_slice().unwrap();
        let mut y = x.clone();
        let ys = y.as_slice_mut().unwrap();
        ys.par_chunks_mut(n).enumerate().for_each(|(i, chunk)| {
            let ch = i % c;
            let istd = 1.0 / ((self.running_var[ch] as f64 + self.eps).sqrt()) as f32;
            let mean = self.running_mean[ch];
            let g = gamma[ch];
            let bt = beta[ch];
            for v in chunk.iter_mut() {
                *v = self.act.apply(g * (*v - mean) * istd + bt);
            }
        });
        let _ = batch;
        y
    }

    pub fn backward(&mut self, dy: &Array5<f32>) -> Array5<f32> {
        let BnCache { xhat, inv_std } = self.cache.take().expect("backward without forward");
        let (batch, c, d, h, w) = xhat.dim();
        let n = d * h * w;
        let count = (batch * n) as f64;
        let xh = xhat.as_slice().unwrap();
        let dys = dy.as_slice().unwrap();
        let gamma = self.gamma.value.as_slice().unwrap();
        let beta = self.beta.value.as_slice().unwrap();
        let act = self.act;

        // Per channel: dβ = Σ g, dγ = Σ g·x̂ with g = dy ⊙ act'(γx̂+β).
        let sums: Vec<(f64, f64)> = (0..c)
            .into_par_iter()
            .map(|ch| {
                let g = gamma[ch];
                let bt = beta[ch];
                let mut dbeta = 0.0f64;
                let mut dgamma = 0.0f64;
                for b in 0..batch {
                    let base = (b * c + ch) * n;
                    for idx in base..base + n {
                        let pre = g * xh[idx] + bt;
                        let gv = dys[idx] * act.grad_from_pre(pre);
                        dbeta += gv as f64;
                        dgamma += (gv * xh[idx]) as f64;
                    }
                }
                (dbeta, dgamma)
            })
            .collect();

        for ch in 0..c {
            self.beta.grad[ch] += sums[ch].0 as f32;
            self.gamma.grad[ch] += sums[ch].1 as f32;
        }

        let mut dx = Array5::<f32>::zeros((batch, c, d, h, w));
        {
            let dxs = dx.as_slice_mut().unwrap();
            dxs.par_chunks_mut(n).enumerate().for_each(|(i, chunk)| {
                let ch = i % c;
                let b = i / c;
                let g = gamma[ch];
                let bt = beta[ch];
                let istd = inv_std[ch];
                let (dbeta, dgamma) = sums[ch];
                let scale = g as f64 * istd / count;
                let base = (b * c + ch) * n;
                for (off, out) in chunk.iter_mut().enumerate() {
                    let idx = base + off;
                    let pre = g * xh[idx] + bt;
                    let gv = (dys[idx] * act.grad_from_pre(pre)) as f64;
                    *out = (scale * (count * gv - dbeta - xh[idx] as f64 * dgamma)) as f32;
                }
            });
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

// ---------------------------------------------------------------------------
// MaxPool3d
// ---------------------------------------------------------------------------

/// Non-overlapping max pooling (kernel == stride). Ties pick the first
/// element in scan order.
pub struct MaxPool3d {
    pub kernel: [usize; 3],
    cache: Option<(usize, [usize; 3], Array5<u32>)>, // (batch, in_dhw, argmax)
}

impl MaxPool3d {
    pub fn new(kernel: [usize; 3]) -> Self {
        MaxPool3d {
            kernel,
            cache: None,
        }
    }

    pub fn out_shape(&self, in_dhw: [usize; 3]) -> [usize; 3] {
        [
            in_dhw[0] / self.kernel[0],
            in_dhw[1] / self.kernel[1],
            in_dhw[2] / self.kernel[2],
        ]
    }

    fn run(&self, x: &Array5<f32>, mut argmax: Option<&mut Array5<u32>>) -> Array5<f32> {
        let (batch, c, d, h, w) = x.dim();
        let [kd, kh, kw] = self.kernel;
        let (od, oh, ow) = (d / kd, h / kh, w / kw);
        let xs = x.as_slice().unwrap();
        let mut y = Array5::<f32>::zeros((batch, c, od, oh, ow));
        let n_in = d * h * w;
        let n_out = od * oh * ow;
        {
            let ys = y.as_slice_mut().unwrap();
            let am_ptr = argmax
                .as_deref_mut()
                .map(|a| a.as_mut_ptr() as usize)
                .unwrap_or(0);
            let has_am = am_ptr != 0;
            ys.par_chunks_mut(n_out).enumerate().for_each(|(bc, yc)| {
                let base = bc * n_in;
                let am = if has_am {
                    Some(unsafe {
                        std::slice::from_raw_parts_mut((am_ptr as *mut u32).add(bc * n_out), n_out)
                    })
                } else {
                    None
                };
                let mut am = am;
                for oz in 0..od {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = f32::NEG_INFINITY;
                            let mut best_idx = 0u32;
                            for dz in 0..kd {
                                let iz = oz * kd + dz;
                                for dyy in 0..kh {
                                    let iy = oy * kh + dyy;
                                    let row = (iz * h + iy) * w + ox * kw;
                                    for dxx in 0..kw {
                                        let v = xs[base + row + dxx];
                                        if v > best {
                                            best = v;
                                            best_idx = (row + dxx) as u32;
                                        }
                                    }
                                }
                            }
                            let o = (oz * oh + oy) * ow + ox;
                            yc[o] = best;
                            if let Some(am) = am.as_deref_mut() {
                                am[o] = best_idx;
                            }
                        }
                    }
                }
            });
        }
        y
    }

    pub fn forward_t(&mut self, x: Array5<f32>) -> Array5<f32> {
        let (batch, c, d, h, w) = x.dim();
        let [od, oh, ow] = self.out_shape([d, h, w]);
        let mut argmax = Array5::<u32>::zeros((batch, c, od, oh, ow));
        let y = self.run(&x, Some(&mut argmax));
        self.cache = Some((batch, [d, h, w], argmax));
        y
    }

    pub fn infer(&self, x: &Array5<f32>) -> Array5<f32> {
        self.run(x, None)
    }

    pub fn backward(&mut self, dy: &Array5<f32>) -> Array5<f32> {
        let (batch, in_dhw, argmax) = self.cache.take().expect("backward without forward");
        let (_, c, od, oh, ow) = dy.dim();
        let n_out = od * oh * ow;
        let n_in = in_dhw.iter().product::<usize>();
        let mut dx = Array5::<f32>::zeros((batch, c, in_dhw[0], in_dhw[1], in_dhw[2]));
        {
            let dxs = dx.as_slice_mut().unwrap();
            let dys = dy.as_slice().unwrap();
            let ams = argmax.as_slice().unwrap();
            // Windows are disjoint, so per-(batch,channel) chunks are safe.
            dxs.par_chunks_mut(n_in).enumerate().for_each(|(bc, dxc)| {
                let base = bc * n_out;
                for o in 0..n_out {
                    dxc[ams[base + o] as usize] += dys[base + o];
                }
            });
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Dropout3d
// ---------------------------------------------------------------------------

/// Channel dropout: zeroes whole (batch, channel) feature volumes with
/// probability `p` during training, scaling survivors by `1/(1-p)`.
pub struct Dropout3d {
    pub p: f64,
    cache_mask: Option<Vec<f32>>, // per (batch, channel)
}

impl Dropout3d {
    pub fn new(p: f64) -> Self {
        assert!((0.0..1.0).contains(&p));
        Dropout3d {
            p,
            cache_mask: None,
        }
    }

    pub fn forward_t(&mut self, mut x: Array5<f32>, rng: &mut ChaCha8Rng) -> Array5<f32> {
        if self.p == 0.0 {
            self.cache_mask = None;
            return x;
        }
        let (batch, c, d, h, w) = x.dim();
        let n = d * h * w;
        let keep = 1.0 / (1.0 - self.p);
        use rand::Rng;
        let mask: Vec<f32> = (0..batch * c)
            .map(|_| {
                if rng.random::<f64>() < self.p {
                    0.0
                } else {
                    keep as f32
                }
            })
            .collect();
        {
            let xs = x.as_slice_mut().unwrap();
            xs.par_chunks_mut(n).enumerate().for_each(|(bc, chunk)| {
                let m = mask[bc];
                if m != 1.0 {
                    for v in chunk.iter_mut() {
                        *v *= m;
                    }
                }
            });
        }
        self.cache_mask = Some(mask);
        x
    }

    pub fn infer(&self, x: &Array5<f32>) -> Array5<f32> {
        x.clone()
    }

    pub fn backward(&mut self, dy: &Array5<f32>) -> Array5<f32> {
        let mut dx = dy.clone();
        if let Some(mask) = self.cache_mask.take() {
            let (_, _, d, h, w) = dx.dim();
            let n = d * h * w;
            let dxs = dx.as_slice_mut().unwrap();
            dxs.par_chunks_mut(n).enumerate().for_each(|(bc, chunk)| {
                let m = mask[bc];
                if m != 1.0 {
                    for v in chunk.iter_mut() {
                        *v *= m;
                    }
                }
            });
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Standalone activation (final layers, no batch norm)
// ---------------------------------------------------------------------------

pub struct ActLayer {
    pub act: Activation,
    cache_y: Option<Array5<f32>>,
}

impl ActLayer {
    pub fn new(act: Activation) -> Self {
        ActLayer { act, cache_y: None }
    }

    pub fn forward_t(&mut self, mut x: Array5<f32>) -> Array5<f32> {
        let act = self.act;
        x.mapv_inplace(move |v| act.apply(v));
        self.cache_y = Some(x.clone());
        x
    }

    pub fn infer(&self, x: &Array5<f32>) -> Array5<f32> {
        let act = self.act;
        let mut y = x.clone();
        y.mapv_inplace(move |v| act.apply(v));
        y
    }

    pub fn backward(&mut self, dy: &Array5<f32>) -> Array5<f32> {
        let y = self.cache_y.take().expect("backward without forward");
        let mut dx = dy.clone();
        let slope = match self.act {
            Activation::Linear => 1.0,
            Activation::Relu => 0.0,
            Activation::LeakyRelu(s) => s,
        };
        // Output sign recovers the pre-activation sign for (leaky) ReLU.
        ndarray::Zip::from(&mut dx).and(&y).for_each(|d, &yv| {
            if yv <= 0.0 {
                *d *= slope;
            }
        });
        dx
    }
}
