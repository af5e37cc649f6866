//! Dataset pipeline: ground-anchored cropping, trilinear resizing with
//! anti-aliasing, exact average pooling, log-space normalization, sliding
//! windows, and run splits.

use std::sync::Arc;

use ndarray::{Array1, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::CoreError;
use crate::types::{ConcentrationSequence, NormalizationSpec, SlidingWindow, WINDOW_LEN};

/// Crops a sequence to `crop_extent_zyx` metres, anchored at ground level
/// and at the quadrant downwind of the source corner: the crop starts at the
/// cell column containing the source x and ends at the cell edge nearest the
/// source y, shifted only as far as floor-division of the extents requires.
///
/// Cell counts use floor division of the requested extent; the realized
/// extent is recorded in the output metadata.
pub fn crop_volume(
    seq: &ConcentrationSequence,
    crop_extent_zyx: [f64; 3],
    source_xy: [f64; 2],
) -> Result<ConcentrationSequence, CoreError> {
    let [nz, ny, nx] = seq.grid_shape();
    let h = seq.cell_size_zyx;
    let n_crop: Vec<usize> = (0..3)
        .map(|d| (crop_extent_zyx[d] / h[d]).floor() as usize)
        .collect();
    let (cz, cy, cx) = (n_crop[0], n_crop[1], n_crop[2]);
    if cz == 0 || cy == 0 || cx == 0 {
        return Err(CoreError::invalid("crop extent smaller than one cell"));
    }
    if cz > nz || cy > ny || cx > nx {
        return Err(CoreError::invalid(format!(
            "crop ({cz},{cy},{cx}) larger than domain ({nz},{ny},{nx})"
        )));
    }

    let src_ix = ((source_xy[0] - seq.origin_zyx[2]) / h[2]).floor() as isize;
    let src_iy_edge = ((source_xy[1] - seq.origin_zyx[1]) / h[1]).ceil() as isize;
    let x0 = (src_ix.max(0) as usize).min(nx - cx);
    let y0 = ((src_iy_edge - cy as isize).max(0) as usize).min(ny - cy);

    let values = seq
        .values
        .slice(ndarray::s![.., 0..cz, y0..y0 + cy, x0..x0 + cx])
        .to_owned();
    Ok(ConcentrationSequence {
        values,
        dt_output: seq.dt_output,
        cell_size_zyx: h,
        origin_zyx: [
            seq.origin_zyx[0],
            seq.origin_zyx[1] + y0 as f64 * h[1],
            seq.origin_zyx[2] + x0 as f64 * h[2],
        ],
    })
}

/// Per-frame trilinear resize to `target_zyx` cells, with a Gaussian
/// anti-aliasing prefilter on axes that are being downsampled. Constant
/// fields map to the same constant.
pub fn resize_sequence(
    seq: &ConcentrationSequence,
    target_zyx: [usize; 3],
) -> Result<ConcentrationSequence, CoreError> {
    if target_zyx.iter().any(|&n| n == 0) {
        return Err(CoreError::invalid("resize target must be positive"));
    }
    let (t, _, _, _) = seq.values.dim();
    let [tz, ty, tx] = target_zyx;
    let mut out = Array4::<f32>::zeros((t, tz, ty, tx));
    for k in 0..t {
        let frame = seq.values.index_axis(Axis(0), k).to_owned();
        let resized = resize_frame(&frame, target_zyx);
        out.index_axis_mut(Axis(0), k).assign(&resized);
    }
    let extent = seq.extent_zyx();
    Ok(ConcentrationSequence {
        values: out,
        dt_output: seq.dt_output,
        cell_size_zyx: [
            extent[0] / tz as f64,
            extent[1] / ty as f64,
            extent[2] / tx as f64,
        ],
        origin_zyx: seq.origin_zyx,
    })
}

/// Trilinear resize of a single frame (separable 1-D passes).
pub fn resize_frame(frame: &Array3<f32>, target_zyx: [usize; 3]) -> Array3<f32> {
    let mut cur = frame.clone();
    for axis in 0..3 {
        cur = resample_axis(&cur, axis, target_zyx[axis]);
    }
    cur
}

fn resample_axis(arr: &Array3<f32>, axis: usize, out_len: usize) -> Array3<f32> {
    let in_len = arr.shape()[axis];
    if in_len == out_len {
        return arr.clone();
    }
    let scale = in_len as f64 / out_len as f64;
    let filtered = if scale > 1.0 {
        let sigma = (scale - 1.0) / 2.0;
        gaussian_axis(arr, axis, sigma)
    } else {
        arr.clone()
    };

    let mut shape = [arr.shape()[0], arr.shape()[1], arr.shape()[2]];
    shape[axis] = out_len;
    let mut out = Array3::<f32>::zeros(shape);
    // Precomputed taps: src = (i + 0.5) * scale - 0.5 with edge clamp.
    let taps: Vec<(usize, usize, f64)> = (0..out_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect();
    for (mut lane_out, lane_in) in out
        .lanes_mut(Axis(axis))
        .into_iter()
        .zip(filtered.lanes(Axis(axis)))
    {
        for (o, &(i0, i1, w)) in taps.iter().enumerate() {
            let a = lane_in[i0] as f64;
            let b = lane_in[i1] as f64;
            lane_out[o] = ((1.0 - w) * a + w * b) as f32;
        }
    }
    out
}

fn gaussian_axis(arr: &Array3<f32>, axis: usize, sigma: f64) -> Array3<f32> {
    if sigma < 1e-3 {
        return arr.clone();
    }
    let radius = (3.0 * sigma).ceil() as usize;
    let mut weights = Array1::<f64>::zeros(2 * radius + 1);
    for j in 0..=2 * radius {
        let d = j as f64 - radius as f64;
        weights[j] = (-0.5 * (d / sigma).powi(2)).exp();
    }
    let total: f64 = weights.sum();
    weights.mapv_inplace(|w| w / total);

    let len = arr.shape()[axis];
    let mut out = arr.clone();
    for (mut lane_out, lane_in) in out
        .lanes_mut(Axis(axis))
        .into_iter()
        .zip(arr.lanes(Axis(axis)))
    {
        for i in 0..len {
            let mut acc = 0.0f64;
            for j in 0..=2 * radius {
                // Edge clamp keeps the kernel mass at 1 so constants survive.
                let src = (i as isize + j as isize - radius as isize).clamp(0, len as isize - 1);
                acc += weights[j] * lane_in[src as usize] as f64;
            }
            lane_out[i] = acc as f32;
        }
    }
    out
}

/// Exact block-mean downsampling; every output cell is the mean of its
/// `factor`-sized block, so total mass times cell volume is preserved up to
/// rounding.
pub fn average_pool_downsample(
    frame: &Array3<f32>,
    factor: [usize; 3],
) -> Result<Array3<f32>, CoreError> {
    let (dz, dy, dx) = frame.dim();
    let [fz, fy, fx] = factor;
    if fz == 0 || fy == 0 || fx == 0 {
        return Err(CoreError::invalid("pool factor must be positive"));
    }
    if dz % fz != 0 || dy % fy != 0 || dx % fx != 0 {
        return Err(CoreError::invalid(format!(
            "shape ({dz},{dy},{dx}) not divisible by pool factor ({fz},{fy},{fx})"
        )));
    }
    let inv = 1.0 / (fz * fy * fx) as f64;
    let mut out = Array3::<f32>::zeros((dz / fz, dy / fy, dx / fx));
    for oz in 0..dz / fz {
        for oy in 0..dy / fy {
            for ox in 0..dx / fx {
                let mut acc = 0.0f64;
                for kz in 0..fz {
                    for ky in 0..fy {
                        for kx in 0..fx {
                            acc += frame[(oz * fz + kz, oy * fy + ky, ox * fx + kx)] as f64;
                        }
                    }
                }
                out[(oz, oy, ox)] = (acc * inv) as f32;
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbor block expansion, the inverse layout of
/// [`average_pool_downsample`].
pub fn upsample_nearest(frame: &Array3<f32>, factor: [usize; 3]) -> Array3<f32> {
    let (dz, dy, dx) = frame.dim();
    Array3::from_shape_fn((dz * factor[0], dy * factor[1], dx * factor[2]), |(z, y, x)| {
        frame[(z / factor[0], y / factor[1], x / factor[2])]
    })
}

/// Applies the log-affine normalization to a sequence.
pub fn log_normalize(
    seq: &ConcentrationSequence,
    spec: &NormalizationSpec,
) -> Result<ConcentrationSequence, CoreError> {
    spec.validate()?;
    Ok(seq.with_values(spec.normalize_array(&seq.values)))
}

/// Inverse of [`log_normalize`]; restores values above the floor.
pub fn log_denormalize(
    seq: &ConcentrationSequence,
    spec: &NormalizationSpec,
) -> Result<ConcentrationSequence, CoreError> {
    spec.validate()?;
    Ok(seq.with_values(spec.denormalize_array(&seq.values)))
}

/// Builds every length-5 sliding window over a sequence; window `k` holds
/// frames `k..k+5` with frame `k+5` as target.
pub fn make_windows(frames: Arc<Array4<f32>>) -> Result<Vec<SlidingWindow>, CoreError> {
    let t = frames.shape()[0];
    if t < WINDOW_LEN + 1 {
        return Err(CoreError::invalid(format!(
            "need at least {} frames for one window, got {t}",
            WINDOW_LEN + 1
        )));
    }
    Ok((0..t - WINDOW_LEN)
        .map(|start| SlidingWindow {
            frames: Arc::clone(&frames),
            start,
        })
        .collect())
}

/// Deterministic 80/10/10 split (proportions rounded, at least one run per
/// partition). Returns `(train, val, test)`.
pub fn split_runs(
    run_ids: &[String],
    seed: u64,
) -> Result<(Vec<String>, Vec<String>, Vec<String>), CoreError> {
    let n = run_ids.len();
    if n < 3 {
        return Err(CoreError::invalid(format!(
            "need at least 3 runs to split, got {n}"
        )));
    }
    let n_val = ((n as f64 * 0.1).round() as usize).max(1);
    let n_test = ((n as f64 * 0.1).round() as usize).max(1);
    let n_train = n - n_val - n_test;
    if n_train == 0 {
        return Err(CoreError::invalid("split leaves no training runs"));
    }

    let mut shuffled: Vec<String> = run_ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);

    let train = shuffled[..n_train].to_vec();
    let val = shuffled[n_train..n_train + n_val].to_vec();
    let test = shuffled[n_train + n_val..].to_vec();
    Ok((train, val, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn seq(shape: (usize, usize, usize, usize), cell: [f64; 3]) -> ConcentrationSequence {
        ConcentrationSequence::new(
            Array4::from_shape_fn(shape, |(t, z, y, x)| {
                (t as f32) + 0.001 * (z * 7 + y * 3 + x) as f32
            }),
            600.0,
            cell,
            [0.0, 0.0, 0.0],
        )
    }

    #[test]
    fn crop_paper_scale_cell_counts() {
        // Paper grid 200x250x250 at 20x40x40 m; crop [2,5,5] km.
        let s = seq((1, 200, 250, 250), [20.0, 40.0, 40.0]);
        let c = crop_volume(&s, [2000.0, 5000.0, 5000.0], [5000.0, 5000.0]).unwrap();
        assert_eq!(c.grid_shape(), [100, 125, 125]);
        // East half starting at the source column, south half ending at the source.
        assert_eq!(c.origin_zyx, [0.0, 0.0, 5000.0]);
    }

    #[test]
    fn crop_desk_scale_floor_division() {
        let s = seq((1, 50, 125, 125), [80.0, 80.0, 80.0]);
        let c = crop_volume(&s, [2000.0, 5000.0, 5000.0], [5000.0, 5000.0]).unwrap();
        assert_eq!(c.grid_shape(), [25, 62, 62]);
        // Source (5000, 5000) lies inside the realized crop.
        assert!(c.origin_zyx[2] <= 5000.0 && 5000.0 < c.origin_zyx[2] + 62.0 * 80.0);
        assert!(c.origin_zyx[1] <= 5000.0 && 5000.0 <= c.origin_zyx[1] + 62.0 * 80.0);
    }

    #[test]
    fn crop_full_domain_is_identity() {
        let s = seq((2, 8, 10, 12), [10.0, 10.0, 10.0]);
        let c = crop_volume(&s, [80.0, 100.0, 120.0], [60.0, 50.0]).unwrap();
        assert_eq!(c.values, s.values);
        assert_eq!(c.origin_zyx, s.origin_zyx);
    }

    #[test]
    fn crop_larger_than_domain_errors() {
        let s = seq((1, 4, 4, 4), [10.0, 10.0, 10.0]);
        assert!(crop_volume(&s, [100.0, 40.0, 40.0], [20.0, 20.0]).is_err());
    }

    #[test]
    fn resize_hits_paper_shapes() {
        let s = seq((2, 25, 62, 62), [80.0, 80.0, 80.0]);
        let lr = resize_sequence(&s, [8, 32, 32]).unwrap();
        let hr = resize_sequence(&s, [32, 128, 128]).unwrap();
        assert_eq!(lr.values.shape(), &[2, 8, 32, 32]);
        assert_eq!(hr.values.shape(), &[2, 32, 128, 128]);
        // Physical extent is preserved by construction.
        let e = s.extent_zyx();
        for d in 0..3 {
            assert!((lr.extent_zyx()[d] - e[d]).abs() < 1e-9);
            assert!((hr.extent_zyx()[d] - e[d]).abs() < 1e-9);
        }
    }

    #[test]
    fn resize_preserves_constants() {
        let c = 3.75f32;
        let s = ConcentrationSequence::new(
            Array4::from_elem((1, 10, 20, 20), c),
            600.0,
            [10.0, 10.0, 10.0],
            [0.0; 3],
        );
        for target in [[8usize, 32, 32], [32, 128, 128], [5, 7, 9]] {
            let r = resize_sequence(&s, target).unwrap();
            for &v in r.values.iter() {
                assert!((v - c).abs() < 1e-6 * c, "target {target:?}: {v} vs {c}");
            }
        }
    }

    #[test]
    fn pool_constant_and_one_hot() {
        let c = Array3::from_elem((8, 8, 8), 2.5f32);
        let p = average_pool_downsample(&c, [4, 4, 4]).unwrap();
        assert!(p.iter().all(|&v| (v - 2.5).abs() < 1e-7));

        let mut hot = Array3::zeros((8, 8, 8));
        hot[(5, 2, 6)] = 64.0;
        let p = average_pool_downsample(&hot, [4, 4, 4]).unwrap();
        assert_eq!(p[(1, 0, 1)], 1.0);
        assert_eq!(p.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn pool_preserves_total_sum() {
        // Values on a 2^-12 lattice make block means exactly representable,
        // so the identity holds to well below the 1e-9 contract.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frame = Array3::from_shape_fn((8, 12, 16), |_| {
            use rand::Rng;
            (rng.random_range(0..4096) as f32) / 4096.0
        });
        let pooled = average_pool_downsample(&frame, [4, 4, 4]).unwrap();
        let sum_in: f64 = frame.iter().map(|&v| v as f64).sum();
        let sum_out: f64 = pooled.iter().map(|&v| v as f64).sum();
        assert!((sum_out * 64.0 - sum_in).abs() <= 1e-9 * sum_in.abs());
    }

    #[test]
    fn pool_then_expand_then_pool_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let frame = Array3::from_shape_fn((8, 8, 8), |_| {
            use rand::Rng;
            rng.random_range(0.0f32..1.0)
        });
        let p1 = average_pool_downsample(&frame, [4, 4, 4]).unwrap();
        let expanded = upsample_nearest(&p1, [4, 4, 4]);
        let p2 = average_pool_downsample(&expanded, [4, 4, 4]).unwrap();
        for (a, b) in p1.iter().zip(p2.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn pool_rejects_indivisible_shapes() {
        let frame = Array3::<f32>::zeros((9, 8, 8));
        assert!(average_pool_downsample(&frame, [4, 4, 4]).is_err());
    }

    #[test]
    fn normalization_floor_roundtrip_and_order() {
        let spec = NormalizationSpec {
            log_floor: 1e-6,
            min_val: -6.0,
            max_val: 0.0,
        };
        // v = 0 maps to the floor value.
        assert!((spec.normalize_value(0.0) - 0.0).abs() < 1e-12);
        // Scalar roundtrip above the floor is exact to f64 precision.
        for v in [2e-6, 1e-4, 0.037, 0.9] {
            let r = spec.denormalize_value(spec.normalize_value(v));
            assert!((r - v).abs() < 1e-12 * v);
        }
        // Array roundtrip through f32 stays within 1e-6 relative.
        let vals = Array4::from_shape_fn((1, 2, 3, 4), |(_, z, y, x)| {
            2e-6f32 * (1.0 + (z * 12 + y * 4 + x) as f32).powi(3)
        });
        let seq = ConcentrationSequence::new(vals.clone(), 1.0, [1.0; 3], [0.0; 3]);
        let back = log_denormalize(&log_normalize(&seq, &spec).unwrap(), &spec).unwrap();
        for (a, b) in vals.iter().zip(back.values.iter()) {
            assert!((a - b).abs() <= 1e-6 * a.abs());
        }
        // Monotonicity above the floor.
        let mut prev = spec.normalize_value(2e-6);
        for v in [1e-5, 1e-3, 0.1, 0.5, 1.0] {
            let n = spec.normalize_value(v);
            assert!(n > prev);
            prev = n;
        }
    }

    #[test]
    fn invalid_spec_is_rejected() {
        let spec = NormalizationSpec {
            log_floor: 1e-6,
            min_val: 0.0,
            max_val: 0.0,
        };
        let seq = seq((1, 2, 2, 2), [1.0; 3]);
        assert!(log_normalize(&seq, &spec).is_err());
    }

    #[test]
    fn windows_count_and_index_law() {
        let frames = Arc::new(Array4::from_shape_fn((33, 2, 2, 2), |(t, ..)| t as f32));
        let windows = make_windows(Arc::clone(&frames)).unwrap();
        assert_eq!(windows.len(), 28);
        for (k, w) in windows.iter().enumerate() {
            assert_eq!(w.start, k);
            for i in 0..5 {
                assert_eq!(w.inputs()[(i, 0, 0, 0)], (k + i) as f32);
            }
            assert_eq!(w.target()[(0, 0, 0)], (k + 5) as f32);
        }

        let six = Arc::new(Array4::from_shape_fn((6, 1, 1, 1), |(t, ..)| t as f32));
        let one = make_windows(six).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].target()[(0, 0, 0)], 5.0);

        let five = Arc::new(Array4::<f32>::zeros((5, 1, 1, 1)));
        assert!(make_windows(five).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ids: Vec<String> = (0..100).map(|i| format!("run_{i:04}")).collect();
        let (tr, va, te) = split_runs(&ids, 42).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (80, 10, 10));

        let ids10: Vec<String> = (0..10).map(|i| format!("r{i}")).collect();
        let (tr, va, te) = split_runs(&ids10, 7).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (8, 1, 1));

        let again = split_runs(&ids10, 7).unwrap();
        assert_eq!((tr, va, te), again);

        // Disjoint and exhaustive.
        let (tr, va, te) = split_runs(&ids10, 9).unwrap();
        let mut all: Vec<&String> = tr.iter().chain(&va).chain(&te).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 10);

        assert!(split_runs(&ids10[..2].to_vec(), 1).is_err());
    }
}
