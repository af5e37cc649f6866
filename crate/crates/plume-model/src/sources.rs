//! Batch assembly for the two training regimes: sliding windows for the
//! temporal models, and pooled low/high-resolution pairs for the refinement
//! module.

use std::sync::Arc;

use ndarray::{Array4, Array5, Axis};
use plume_core::pipeline::average_pool_downsample;
use plume_core::SlidingWindow;
use plume_nn::BatchSource;

/// `(B, 5, Z, Y, X)` inputs and `(B, 1, Z, Y, X)` next-frame targets.
pub struct WindowSource {
    pub windows: Vec<SlidingWindow>,
}

impl WindowSource {
    pub fn new(windows: Vec<SlidingWindow>) -> Self {
        WindowSource { windows }
    }
}

impl BatchSource for WindowSource {
    fn len(&self) -> usize {
        self.windows.len()
    }

    fn assemble(&self, indices: &[usize]) -> (Array5<f32>, Array5<f32>) {
        let first = &self.windows[indices[0]];
        let (_, z, y, x) = first.frames.dim().into();
        let w = first.inputs().shape()[0];
        let b = indices.len();
        let mut xs = Array5::<f32>::zeros((b, w, z, y, x));
        let mut ts = Array5::<f32>::zeros((b, 1, z, y, x));
        for (row, &i) in indices.iter().enumerate() {
            let win = &self.windows[i];
            xs.index_axis_mut(Axis(0), row).assign(&win.inputs());
            ts.index_axis_mut(Axis(0), row)
                .index_axis_mut(Axis(0), 0)
                .assign(&win.target());
        }
        (xs, ts)
    }
}

/// Supervised super-resolution pairs: inputs are average-pooled from the
/// high-resolution targets on the fly.
pub struct PoolPairSource {
    /// (sequence, frame index) pairs referencing normalized HR sequences.
    pub frames: Vec<(Arc<Array4<f32>>, usize)>,
    pub factor: [usize; 3],
}

impl PoolPairSource {
    pub fn new(frames: Vec<(Arc<Array4<f32>>, usize)>, factor: [usize; 3]) -> Self {
        PoolPairSource { frames, factor }
    }

    /// Every frame of every sequence, optionally subsampled in time.
    pub fn from_sequences(seqs: &[Arc<Array4<f32>>], factor: [usize; 3], stride: usize) -> Self {
        let mut frames = Vec::new();
        for seq in seqs {
            for t in (0..seq.shape()[0]).step_by(stride.max(1)) {
                frames.push((Arc::clone(seq), t));
            }
        }
        PoolPairSource { frames, factor }
    }
}

impl BatchSource for PoolPairSource {
    fn len(&self) -> usize {
        self.frames.len()
    }

    fn assemble(&self, indices: &[usize]) -> (Array5<f32>, Array5<f32>) {
        let (seq0, _) = &self.frames[indices[0]];
        let (_, hz, hy, hx) = seq0.dim().into();
        let [fz, fy, fx] = self.factor;
        let (lz, ly, lx) = (hz / fz, hy / fy, hx / fx);
        let b = indices.len();
        let mut xs = Array5::<f32>::zeros((b, 1, lz, ly, lx));
        let mut ts = Array5::<f32>::zeros((b, 1, hz, hy, hx));
        for (row, &i) in indices.iter().enumerate() {
            let (seq, t) = &self.frames[i];
            let hr = seq.index_axis(Axis(0), *t).to_owned();
            let lr = average_pool_downsample(&hr, self.factor).expect("divisible shapes");
            xs.index_axis_mut(Axis(0), row)
                .index_axis_mut(Axis(0), 0)
                .assign(&lr);
            ts.index_axis_mut(Axis(0), row)
                .index_axis_mut(Axis(0), 0)
                .assign(&hr);
        }
        (xs, ts)
    }
}
