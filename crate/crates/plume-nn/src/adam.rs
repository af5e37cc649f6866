//! Adam optimizer with optional global-norm gradient clipping.

use crate::param::Param;

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    /// First/second moment per parameter, aligned with the params order.
    slots: Vec<(Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            slots: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Param]) {
        if self.slots.is_empty() {
            self.slots = params
                .iter()
                .map(|p| (vec![0.0; p.len()], vec![0.0; p.len()]))
                .collect();
        }
        assert_eq!(self.slots.len(), params.len(), "parameter set changed");
        self.step_count += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bc1 = 1.0 - b1.powi(self.step_count as i32);
        let bc2 = 1.0 - b2.powi(self.step_count as i32);
        let lr = self.lr;
        let eps = self.eps;

        for (param, (m, v)) in params.iter_mut().zip(self.slots.iter_mut()) {
            let values = param.value.as_slice_mut().expect("contiguous param");
            let grads = param.grad.as_slice().expect("contiguous grad");
            for i in 0..values.len() {
                let g = grads[i] as f64;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                values[i] -= update as f32;
            }
        }
    }

    /// Serialized moments, named `<param>.m` / `<param>.v`.
    pub fn state_blobs(&self, params: &[&Param]) -> Vec<(String, Vec<f32>)> {
        let mut out = Vec::new();
        for (p, (m, v)) in params.iter().zip(self.slots.iter()) {
            out.push((format!("{}.m", p.name), m.clone()));
            out.push((format!("{}.v", p.name), v.clone()));
        }
        out
    }

    pub fn load_state_blobs(
        &mut self,
        params: &[&Param],
        mut lookup: impl FnMut(&str) -> Option<Vec<f32>>,
    ) -> bool {
        let mut slots = Vec::with_capacity(params.len());
        for p in params {
            let m = lookup(&format!("{}.m", p.name));
            let v = lookup(&format!("{}.v", p.name));
            match (m, v) {
                (Some(m), Some(v)) if m.len() == p.len() && v.len() == p.len() => {
                    slots.push((m, v));
                }
                _ => return false,
            }
        }
        self.slots = slots;
        true
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(params: &mut [&mut Param], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for p in params.iter() {
        for &g in p.grad.iter() {
            sq += g as f64 * g as f64;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = (max_norm / norm) as f32;
        for p in params.iter_mut() {
            for g in p.grad.iter_mut() {
                *g *= scale;
            }
        }
    }
    norm
}
