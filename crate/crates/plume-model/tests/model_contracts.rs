//! Shape contracts, parameter counts, determinism, batch equivalence, and
//! the rollout protocol.

use ndarray::{Array3, Array4, Array5};
use plume_model::{
    rollout, BottleneckKind, FrameProvenance, HrtmModel, HRTMConfig, RefinementModel, RolloutPlan,
    SingleStepModel, TemporalModel, TMConfig, SRMConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_fn(shape, |_| rng.random_range(0.0f32..1.0))
}

#[test]
fn tm_shape_contract_and_nonnegativity() {
    let (tm, report) = TemporalModel::build(TMConfig::default()).unwrap();
    let x = Array5::<f32>::zeros((1, 5, 8, 32, 32));
    let y = tm.predict_batch(&x).unwrap();
    assert_eq!(y.shape(), &[1, 1, 8, 32, 32]);
    assert!(y.iter().all(|v| v.is_finite() && *v >= 0.0));

    let x3 = rand4((5, 8, 32, 32), 1);
    let f = tm.predict_step(&x3).unwrap();
    assert_eq!(f.shape(), &[8, 32, 32]);

    // Default widths reproduce the published parameter count exactly.
    assert_eq!(report.param_count, 3_214_401);
}

#[test]
fn tm_sevenfold_preset_count_matches_closed_form() {
    let (_, report) = TemporalModel::build(TMConfig::sevenfold()).unwrap();
    // Closed form for widths (c1, c2, c3) with a window of 5 input channels:
    // convs k=3^3, bottleneck c3->c3, transposed k=2^3, batch norms 2c each.
    let (c1, c2, c3) = (112usize, 224usize, 448usize);
    let expected = (5 * c1 * 27 + c1)
        + (c1 * c2 * 27 + c2)
        + (c2 * c3 * 27 + c3)
        + (c3 * c3 * 27 + c3)
        + (c3 * c2 * 8 + c2)
        + (c2 * c1 * 8 + c1)
        + (c1 * 8 + 1)
        + 2 * (c1 + c2 + c3)
        + 2 * (c2 + c1);
    assert_eq!(report.param_count, expected);
    assert_eq!(expected, 9_829_233);
}

#[test]
fn tm_eval_is_deterministic_and_batch_consistent() {
    let (tm, _) = TemporalModel::build(TMConfig::default()).unwrap();
    let w = rand4((5, 8, 32, 32), 7);
    let a = tm.predict_step(&w).unwrap();
    let b = tm.predict_step(&w).unwrap();
    assert_eq!(a, b, "eval-mode forward must be bit-identical");

    // Batch of 3 windows equals per-window predictions.
    let mut batch = Array5::<f32>::zeros((3, 5, 8, 32, 32));
    let singles: Vec<Array3<f32>> = (0..3)
        .map(|i| {
            let wi = rand4((5, 8, 32, 32), 100 + i as u64);
            batch
                .index_axis_mut(ndarray::Axis(0), i)
                .assign(&wi);
            tm.predict_step(&wi).unwrap()
        })
        .collect();
    let joint = tm.predict_batch(&batch).unwrap();
    for i in 0..3 {
        let ji = joint
            .index_axis(ndarray::Axis(0), i)
            .index_axis(ndarray::Axis(0), 0)
            .to_owned();
        let max_diff = ji
            .iter()
            .zip(singles[i].iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff < 1e-5, "batch row {i} differs by {max_diff}");
    }
}

#[test]
fn tm_rejects_bad_window_shapes() {
    let (tm, _) = TemporalModel::build(TMConfig::default()).unwrap();
    let bad = rand4((4, 8, 32, 32), 3);
    assert!(tm.predict_step(&bad).is_err());
}

#[test]
fn tm_convlstm_variant_builds_and_runs() {
    let cfg = TMConfig {
        bottleneck: BottleneckKind::ConvLstm,
        enc_channels: [8, 16, 32],
        ..TMConfig::default()
    };
    let (tm, report) = TemporalModel::build(cfg).unwrap();
    assert!(report.param_count > 0);
    let x = rand4((5, 8, 32, 32), 11);
    let y = tm.predict_step(&x).unwrap();
    assert_eq!(y.shape(), &[8, 32, 32]);
    assert!(y.iter().all(|v| v.is_finite()));
}

#[test]
fn tm_construction_failure_names_stage() {
    let cfg = TMConfig {
        input_shape: [7, 32, 32], // 7 is not divisible through three pools
        ..TMConfig::default()
    };
    match TemporalModel::build(cfg) {
        Err(plume_nn::NnError::Construction { stage, .. }) => {
            assert!(stage.starts_with("enc"), "stage {stage}");
        }
        Err(other) => panic!("expected construction failure, got {other:?}"),
        Ok(_) => panic!("expected construction failure, build succeeded"),
    }
}

#[test]
fn srm_shape_contract_fourfold_and_count() {
    let (srm, report) = RefinementModel::build(SRMConfig::default()).unwrap();
    assert_eq!(report.param_count, 951_873);

    for b in [1usize, 7] {
        let x = rand4((b, 8, 32, 32), b as u64);
        let y = srm.super_resolve(&x).unwrap();
        assert_eq!(y.shape(), &[b, 32, 128, 128]);
        assert!(y.iter().all(|v| v.is_finite()));
    }
    // Fourfold factor in every axis.
    let cfg = SRMConfig::default();
    for d in 0..3 {
        assert_eq!(cfg.output_shape[d], 4 * cfg.input_shape[d]);
    }

    // Repeated calls bit-identical.
    let x = rand4((2, 8, 32, 32), 5);
    assert_eq!(srm.super_resolve(&x).unwrap(), srm.super_resolve(&x).unwrap());
}

#[test]
fn srm_bad_stride_composition_fails_with_stage_listing() {
    let cfg = SRMConfig {
        up_strides: [[2, 2, 2]; 4],
        ..SRMConfig::default()
    };
    match RefinementModel::build(cfg) {
        Err(plume_nn::NnError::Construction { stage, detail }) => {
            assert!(stage.starts_with("dec"), "stage {stage}: {detail}");
        }
        Err(other) => panic!("expected construction failure, got {other:?}"),
        Ok(_) => panic!("expected construction failure, build succeeded"),
    }
}

#[test]
fn hrtm_shape_contract() {
    let (hrtm, report) = HrtmModel::build(HRTMConfig::default()).unwrap();
    // num_layers = 2 shares the TM layer structure, hence the same count.
    assert_eq!(report.param_count, 3_214_401);
    let x = Array5::<f32>::zeros((1, 5, 32, 128, 128));
    use plume_nn::BatchModel;
    let y = hrtm.infer_batch(&x);
    assert_eq!(y.shape(), &[1, 1, 32, 128, 128]);
    assert!(y.iter().all(|v| v.is_finite() && *v >= 0.0));
}

/// Deterministic toy model for protocol tests: next frame = mean of the
/// window plus a constant.
struct MeanModel {
    shape: [usize; 3],
}

impl SingleStepModel for MeanModel {
    fn window_len(&self) -> usize {
        5
    }

    fn frame_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn step(&self, window: &Array4<f32>) -> Array3<f32> {
        let w = window.shape()[0] as f32;
        let mut out = Array3::<f32>::zeros((self.shape[0], self.shape[1], self.shape[2]));
        for k in 0..window.shape()[0] {
            out += &window.index_axis(ndarray::Axis(0), k);
        }
        out.mapv(|v| v / w + 0.125)
    }
}

#[test]
fn rollout_protocol_provenance_and_recurrence() {
    let model = MeanModel { shape: [2, 3, 3] };
    let gt = rand4((33, 2, 3, 3), 21);
    let initial = gt.slice(ndarray::s![0..5, .., .., ..]).to_owned();

    // No updates: first five frames ground truth, everything after predicted.
    let plan = RolloutPlan::new(33).recording_windows();
    let out = rollout(&model, &initial, None, &plan).unwrap();
    assert_eq!(out.frames.shape(), &[33, 2, 3, 3]);
    assert_eq!(out.provenance.len(), 33);
    for k in 0..5 {
        assert_eq!(out.provenance[k], FrameProvenance::GroundTruth);
    }
    for k in 5..33 {
        assert_eq!(out.provenance[k], FrameProvenance::Predicted);
    }
    // Window recurrence: window(t+1)[0..3] == window(t)[1..4], exactly.
    assert_eq!(out.windows.len(), 28);
    for t in 0..out.windows.len() - 1 {
        let cur = &out.windows[t];
        let next = &out.windows[t + 1];
        assert_eq!(
            next.slice(ndarray::s![0..4, .., .., ..]),
            cur.slice(ndarray::s![1..5, .., .., ..]),
            "window recurrence at step {t}"
        );
    }
    // Step k <= 5 windows contain 5-k+1 ground-truth frames: window k-5
    // (0-based prediction index) overlaps the seed frames.
    for (t, window) in out.windows.iter().enumerate().take(5) {
        let gt_frames_in_window = 5usize.saturating_sub(t);
        for i in 0..gt_frames_in_window {
            assert_eq!(
                window.index_axis(ndarray::Axis(0), i),
                gt.index_axis(ndarray::Axis(0), t + i),
                "prediction step {t} input {i} should still be ground truth"
            );
        }
    }

    // Scheduled updates {6, 9, 15}: ground truth appears exactly there.
    let plan = RolloutPlan::new(33).with_updates([6, 9, 15]).recording_windows();
    let out = rollout(&model, &initial, Some(&gt), &plan).unwrap();
    for k in 0..33 {
        let expected = if k < 5 || [6, 9, 15].contains(&k) {
            FrameProvenance::GroundTruth
        } else {
            FrameProvenance::Predicted
        };
        assert_eq!(out.provenance[k], expected, "frame {k}");
    }
    for &k in &[6usize, 9, 15] {
        assert_eq!(
            out.frames.index_axis(ndarray::Axis(0), k),
            gt.index_axis(ndarray::Axis(0), k)
        );
    }
    // Recurrence still exact with updates.
    for t in 0..out.windows.len() - 1 {
        assert_eq!(
            out.windows[t + 1].slice(ndarray::s![0..4, .., .., ..]),
            out.windows[t].slice(ndarray::s![1..5, .., .., ..])
        );
    }

    // Update schedule mapping from hours at 10-minute cadence.
    let sched = RolloutPlan::schedule_from_hours(&[1.0, 1.5, 2.5], 600.0);
    assert_eq!(sched.into_iter().collect::<Vec<_>>(), vec![6, 9, 15]);
}

#[test]
fn rollout_rejects_updates_without_ground_truth() {
    let model = MeanModel { shape: [2, 3, 3] };
    let gt = rand4((10, 2, 3, 3), 2);
    let initial = gt.slice(ndarray::s![0..5, .., .., ..]).to_owned();

    let plan = RolloutPlan::new(33).with_updates([6]);
    assert!(rollout(&model, &initial, None, &plan).is_err());

    // Ground truth too short for the scheduled index.
    let plan = RolloutPlan::new(33).with_updates([15]);
    assert!(rollout(&model, &initial, Some(&gt), &plan).is_err());

    // Update inside the seed window.
    let plan = RolloutPlan::new(33).with_updates([3]);
    assert!(rollout(&model, &initial, Some(&gt), &plan).is_err());
}
