//! Convolutional LSTM cell over a short frame window, used as the optional
//! recurrent bottleneck. Gates come from 3x3x3 convolutions of the input and
//! the previous hidden state; backpropagation unrolls the full window.

use ndarray::{s, Array5};
use rand_chacha::ChaCha8Rng;

use crate::conv::{conv_forward, conv_grad_weights, flip_weights, sum_per_channel, ConvGeom};
use crate::layers::w_as_matrix;
use crate::param::Param;

struct StepCache {
    x: Array5<f32>,
    h_prev: Array5<f32>,
    c_prev: Array5<f32>,
    gates: Array5<f32>, // (B, 4H, d, h, w), post-activation [i, f, o, g]
    c: Array5<f32>,
}

pub struct ConvLstm3d {
    pub w_x: Param, // (4H, Cin, 3, 3, 3)
    pub w_h: Param, // (4H, H, 3, 3, 3)
    pub b: Param,   // (4H,)
    pub hidden: usize,
    cache: Option<Vec<StepCache>>,
}

fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

impl ConvLstm3d {
    pub fn new(name: &str, cin: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let w_x = Param::uniform_fan_in(
            format!("{name}.w_x"),
            &[4 * hidden, cin, 3, 3, 3],
            cin * 27,
            rng,
        );
        let w_h = Param::uniform_fan_in(
            format!("{name}.w_h"),
            &[4 * hidden, hidden, 3, 3, 3],
            hidden * 27,
            rng,
        );
        let mut b = Param::uniform_fan_in(format!("{name}.b"), &[4 * hidden], cin * 27, rng);
        // Forget gate starts open.
        for ch in hidden..2 * hidden {
            b.value[ch] += 1.0;
        }
        ConvLstm3d {
            w_x,
            w_h,
            b,
            hidden,
            cache: None,
        }
    }

    fn geom(dhw: [usize; 3]) -> ConvGeom {
        ConvGeom::simple(dhw, [3, 3, 3], [1, 1, 1], [1, 1, 1])
    }

    fn gate_pass(&self, x: &Array5<f32>, h_prev: &Array5<f32>) -> Array5<f32> {
        let (_, _, d, h, w) = x.dim();
        let geom = Self::geom([d, h, w]);
        let wx2 = w_as_matrix(&self.w_x, 4 * self.hidden);
        let wh2 = w_as_matrix(&self.w_h, 4 * self.hidden);
        let mut z = conv_forward(x, &wx2, self.b.value.as_slice(), &geom);
        let zh = conv_forward(h_prev, &wh2, None, &geom);
        z += &zh;
        // In place: [i, f, o] sigmoid, [g] tanh.
        let hidden = self.hidden;
        let (batch, c4, dd, hh, ww) = z.dim();
        let n = dd * hh * ww;
        let zs = z.as_slice_mut().unwrap();
        for bc in 0..batch * c4 {
            let ch = bc % c4;
            let sl = &mut zs[bc * n..(bc + 1) * n];
            if ch < 3 * hidden {
                for v in sl.iter_mut() {
                    *v = sigmoid(*v);
                }
            } else {
                for v in sl.iter_mut() {
                    *v = v.tanh();
                }
            }
        }
        z
    }

    fn step(
        &self,
        x: &Array5<f32>,
        h_prev: &Array5<f32>,
        c_prev: &Array5<f32>,
    ) -> (Array5<f32>, Array5<f32>, Array5<f32>) {
        let hid = self.hidden;
        let gates = self.gate_pass(x, h_prev);
        let i = gates.slice(s![.., 0..hid, .., .., ..]);
        let f = gates.slice(s![.., hid..2 * hid, .., .., ..]);
        let o = gates.slice(s![.., 2 * hid..3 * hid, .., .., ..]);
        let g = gates.slice(s![.., 3 * hid..4 * hid, .., .., ..]);
        let c = &(&f * c_prev) + &(&i * &g);
        let h = &o.to_owned() * &c.mapv(f32::tanh);
        (h, c, gates)
    }

    /// Runs the cell over the window; returns the final hidden state.
    pub fn forward_t(&mut self, xs: Vec<Array5<f32>>) -> Array5<f32> {
        let (batch, _, d, h, w) = xs[0].dim();
        let hid = self.hidden;
        let mut h_t = Array5::<f32>::zeros((batch, hid, d, h, w));
        let mut c_t = h_t.clone();
        let mut steps = Vec::with_capacity(xs.len());
        for x in xs {
            let (h_new, c_new, gates) = self.step(&x, &h_t, &c_t);
            steps.push(StepCache {
                x,
                h_prev: h_t,
                c_prev: c_t,
                gates,
                c: c_new.clone(),
            });
            h_t = h_new;
            c_t = c_new;
        }
        self.cache = Some(steps);
        h_t
    }

    pub fn infer(&self, xs: &[Array5<f32>]) -> Array5<f32> {
        let (batch, _, d, h, w) = xs[0].dim();
        let hid = self.hidden;
        let mut h_t = Array5::<f32>::zeros((batch, hid, d, h, w));
        let mut c_t = h_t.clone();
        for x in xs {
            let (h_new, c_new, _) = self.step(x, &h_t, &c_t);
            h_t = h_new;
            c_t = c_new;
        }
        h_t
    }

    /// Backpropagates through the unrolled window; returns per-step input
    /// gradients in forward order.
    pub fn backward(&mut self, d_last_h: &Array5<f32>) -> Vec<Array5<f32>> {
        let steps = self.cache.take().expect("backward without forward");
        let hid = self.hidden;
        let (_, _, d, h, w) = d_last_h.dim();
        let geom = Self::geom([d, h, w]);
        let wx5 = self
            .w_x
            .value
            .view()
            .into_dimensionality::<ndarray::Ix5>()
            .unwrap()
            .to_owned();
        let wh5 = self
            .w_h
            .value
            .view()
            .into_dimensionality::<ndarray::Ix5>()
            .unwrap()
            .to_owned();
        let wxf = flip_weights(&wx5);
        let whf = flip_weights(&wh5);
        let geom_flip = geom.flipped();

        let mut dh = d_last_h.clone();
        let mut dc: Option<Array5<f32>> = None;
        let mut dxs: Vec<Array5<f32>> = Vec::with_capacity(steps.len());

        for step in steps.iter().rev() {
            let i = step.gates.slice(s![.., 0..hid, .., .., ..]).to_owned();
            let f = step.gates.slice(s![.., hid..2 * hid, .., .., ..]).to_owned();
            let o = step
                .gates
                .slice(s![.., 2 * hid..3 * hid, .., .., ..])
                .to_owned();
            let g = step
                .gates
                .slice(s![.., 3 * hid..4 * hid, .., .., ..])
                .to_owned();
            let tanh_c = step.c.mapv(f32::tanh);

            let mut dc_t = &dh * &o * tanh_c.mapv(|t| 1.0 - t * t);
            if let Some(prev) = dc.take() {
                dc_t += &prev;
            }

            let d_o = &dh * &tanh_c;
            let d_i = &dc_t * &g;
            let d_g = &dc_t * &i;
            let d_f = &dc_t * &step.c_prev;

            let (batch, _, dd, hh, ww) = dh.dim();
            let mut dz = Array5::<f32>::zeros((batch, 4 * hid, dd, hh, ww));
            dz.slice_mut(s![.., 0..hid, .., .., ..])
                .assign(&(&d_i * &i * i.mapv(|v| 1.0 - v)));
            dz.slice_mut(s![.., hid..2 * hid, .., .., ..])
                .assign(&(&d_f * &f * f.mapv(|v| 1.0 - v)));
            dz.slice_mut(s![.., 2 * hid..3 * hid, .., .., ..])
                .assign(&(&d_o * &o * o.mapv(|v| 1.0 - v)));
            dz.slice_mut(s![.., 3 * hid..4 * hid, .., .., ..])
                .assign(&(&d_g * g.mapv(|v| 1.0 - v * v)));

            let dwx = conv_grad_weights(&dz, &step.x, &geom);
            for (gacc, v) in self.w_x.grad.iter_mut().zip(dwx.iter()) {
                *gacc += v;
            }
            let dwh = conv_grad_weights(&dz, &step.h_prev, &geom);
            for (gacc, v) in self.w_h.grad.iter_mut().zip(dwh.iter()) {
                *gacc += v;
            }
            for (gacc, v) in self.b.grad.iter_mut().zip(sum_per_channel(&dz)) {
                *gacc += v;
            }

            dxs.push(conv_forward(&dz, &wxf, None, &geom_flip));
            dh = conv_forward(&dz, &whf, None, &geom_flip);
            dc = Some(&dc_t * &f);
        }

        dxs.reverse();
        dxs
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w_x, &mut self.w_h, &mut self.b]
    }
}
