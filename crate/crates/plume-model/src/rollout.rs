//! Autoregressive rollout with per-frame provenance and optional
//! ground-truth update injection.
//!
//! The window always holds the five most recent output frames. Prediction
//! appends the model output unless the step index is scheduled for an
//! observational update, in which case the ground-truth frame is appended
//! instead. The first five frames come straight from ground truth, so the
//! model leaves the data-driven regime only after that.

use std::collections::BTreeSet;

use ndarray::{Array3, Array4, Axis};

use plume_nn::NnError;

/// One next-frame predictor over a fixed-length window.
pub trait SingleStepModel {
    fn window_len(&self) -> usize;
    fn frame_shape(&self) -> [usize; 3];
    fn step(&self, window: &Array4<f32>) -> Array3<f32>;
}

impl SingleStepModel for crate::tm::TemporalModel {
    fn window_len(&self) -> usize {
        self.config.input_window
    }

    fn frame_shape(&self) -> [usize; 3] {
        self.config.input_shape
    }

    fn step(&self, window: &Array4<f32>) -> Array3<f32> {
        self.predict_step(window).expect("window shape checked by rollout")
    }
}

impl SingleStepModel for crate::hrtm::HrtmModel {
    fn window_len(&self) -> usize {
        self.config.input_window
    }

    fn frame_shape(&self) -> [usize; 3] {
        self.config.input_shape
    }

    fn step(&self, window: &Array4<f32>) -> Array3<f32> {
        self.predict_step(window).expect("window shape checked by rollout")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Copy, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameProvenance {
    GroundTruth,
    Predicted,
}

#[derive(Debug, Clone)]
pub struct RolloutPlan {
    pub total_steps: usize,
    /// Frame indices at which the ground-truth frame replaces the prediction.
    pub update_schedule: BTreeSet<usize>,
    /// Keep a copy of every input window (used by protocol tests; costly at
    /// high resolution).
    pub record_windows: bool,
}

impl RolloutPlan {
    pub fn new(total_steps: usize) -> Self {
        RolloutPlan {
            total_steps,
            update_schedule: BTreeSet::new(),
            record_windows: false,
        }
    }

    pub fn with_updates(mut self, schedule: impl IntoIterator<Item = usize>) -> Self {
        self.update_schedule = schedule.into_iter().collect();
        self
    }

    pub fn recording_windows(mut self) -> Self {
        self.record_windows = true;
        self
    }

    /// Maps update times in hours to frame indices at the given cadence.
    pub fn schedule_from_hours(hours: &[f64], dt_output_s: f64) -> BTreeSet<usize> {
        hours
            .iter()
            .map(|h| (h * 3600.0 / dt_output_s).round() as usize)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct RolloutResult {
    /// `(total_steps, Z, Y, X)` output sequence.
    pub frames: Array4<f32>,
    /// Per output frame: ground truth or model prediction.
    pub provenance: Vec<FrameProvenance>,
    /// Input windows per prediction step, when recorded.
    pub windows: Vec<Array4<f32>>,
}

/// Runs the autoregressive rollout. `initial` provides the seed window
/// (window_len ground-truth frames); `ground_truth` must cover every
/// scheduled update index.
pub fn rollout<M: SingleStepModel>(
    model: &M,
    initial: &Array4<f32>,
    ground_truth: Option<&Array4<f32>>,
    plan: &RolloutPlan,
) -> Result<RolloutResult, NnError> {
    let w = model.window_len();
    let [z, y, x] = model.frame_shape();
    if initial.shape() != [w, z, y, x] {
        return Err(NnError::invalid(format!(
            "initial window shape {:?}, expected ({w}, {z}, {y}, {x})",
            initial.shape()
        )));
    }
    if plan.total_steps == 0 {
        return Err(NnError::invalid("rollout needs at least one step"));
    }
    for &idx in &plan.update_schedule {
        if idx < w {
            return Err(NnError::invalid(format!(
                "update at frame {idx} lies inside the ground-truth seed window"
            )));
        }
        if idx >= plan.total_steps {
            return Err(NnError::invalid(format!(
                "update at frame {idx} beyond rollout length {}",
                plan.total_steps
            )));
        }
        let covered = ground_truth
            .map(|gt| gt.shape()[0] > idx && gt.shape()[1..] == [z, y, x])
            .unwrap_or(false);
        if !covered {
            return Err(NnError::invalid(format!(
                "update at frame {idx} has no ground-truth frame available"
            )));
        }
    }

    let mut frames = Array4::<f32>::zeros((plan.total_steps, z, y, x));
    let mut provenance = Vec::with_capacity(plan.total_steps);
    let seed_len = w.min(plan.total_steps);
    for k in 0..seed_len {
        frames
            .index_axis_mut(Axis(0), k)
            .assign(&initial.index_axis(Axis(0), k));
        provenance.push(FrameProvenance::GroundTruth);
    }

    let mut windows = Vec::new();
    for k in w..plan.total_steps {
        let window = frames.slice(ndarray::s![k - w..k, .., .., ..]).to_owned();
        if plan.record_windows {
            windows.push(window.clone());
        }
        if plan.update_schedule.contains(&k) {
            let gt = ground_truth.expect("validated above");
            frames
                .index_axis_mut(Axis(0), k)
                .assign(&gt.index_axis(Axis(0), k));
            provenance.push(FrameProvenance::GroundTruth);
        } else {
            let pred = model.step(&window);
            frames.index_axis_mut(Axis(0), k).assign(&pred);
            provenance.push(FrameProvenance::Predicted);
        }
    }

    Ok(RolloutResult {
        frames,
        provenance,
        windows,
    })
}
