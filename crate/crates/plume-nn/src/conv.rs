//! Tiled im2col + GEMM engine for 3D convolution-like gathers.
//!
//! One geometry description serves the forward pass, the input-gradient
//! pass (a flipped stride-1 convolution), and the weight-gradient pass (the
//! same gather contracted against the other operand). Work is split into a
//! fixed list of (sample, row-range) jobs grouped into a thread-independent
//! number of chunks; weight-gradient partials are reduced in chunk order,
//! so results are reproducible for a given thread count.

use ndarray::{Array2, Array5};
use rayon::prelude::*;

/// Geometry of a conv-like gather: output voxel `(od, oh, ow)` reads the
/// input at `(od*s - pad_lo + kd, ...)` for every kernel tap. Pads may be
/// negative (pure offsets), which the transposed-convolution phase
/// decomposition needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_dhw: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad_lo: [isize; 3],
    pub pad_hi: [isize; 3],
}

impl ConvGeom {
    pub fn simple(in_dhw: [usize; 3], kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Self {
        ConvGeom {
            in_dhw,
            kernel,
            stride,
            pad_lo: [pad[0] as isize, pad[1] as isize, pad[2] as isize],
            pad_hi: [pad[0] as isize, pad[1] as isize, pad[2] as isize],
        }
    }

    pub fn out_dhw(&self) -> [usize; 3] {
        let mut out = [0usize; 3];
        for d in 0..3 {
            let span = self.in_dhw[d] as isize + self.pad_lo[d] + self.pad_hi[d]
                - self.kernel[d] as isize;
            assert!(
                span >= 0,
                "conv geometry under-spans axis {d}: {:?}",
                self
            );
            out[d] = (span / self.stride[d] as isize) as usize + 1;
        }
        out
    }

    pub fn k_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Geometry of the input gradient of a stride-1 convolution: a stride-1
    /// convolution over the output with flipped kernel and complementary pads.
    pub fn flipped(&self) -> ConvGeom {
        assert_eq!(self.stride, [1, 1, 1], "flip only defined for stride 1");
        let out = self.out_dhw();
        let mut pad_lo = [0isize; 3];
        let mut pad_hi = [0isize; 3];
        for d in 0..3 {
            pad_lo[d] = self.kernel[d] as isize - 1 - self.pad_lo[d];
            pad_hi[d] = self.kernel[d] as isize - 1 - self.pad_hi[d];
        }
        ConvGeom {
            in_dhw: out,
            kernel: self.kernel,
            stride: [1, 1, 1],
            pad_lo,
            pad_hi,
        }
    }
}

/// Channel-swapped, kernel-flipped weight matrix `(Cin, Cout*kvol)` for the
/// input-gradient convolution.
pub fn flip_weights(w: &Array5<f32>) -> Array2<f32> {
    let (cout, cin, kd, kh, kw) = w.dim();
    let mut out = Array2::<f32>::zeros((cin, cout * kd * kh * kw));
    for co in 0..cout {
        for ci in 0..cin {
            for a in 0..kd {
                for b in 0..kh {
                    for c in 0..kw {
                        let col = ((co * kd + (kd - 1 - a)) * kh + (kh - 1 - b)) * kw
                            + (kw - 1 - c);
                        out[(ci, col)] = w[(co, ci, a, b, c)];
                    }
                }
            }
        }
    }
    out
}

struct SendPtr(*mut f32);
unsafe impl Send for SendPtr {}
unsafe impl Sync for SendPtr {}

const MAX_COL_BYTES: usize = 12 << 20;

/// (sample, first output row, one-past-last output row) jobs.
fn make_jobs(batch: usize, geom: &ConvGeom, k_rows: usize) -> (Vec<(usize, usize, usize)>, usize) {
    let [do_, ho, wo] = geom.out_dhw();
    let rows_total = do_ * ho;
    let bytes_per_row = k_rows * 4 * wo;
    let rows_per_tile = (MAX_COL_BYTES / bytes_per_row.max(1)).clamp(1, rows_total);
    let mut jobs = Vec::new();
    for b in 0..batch {
        let mut r = 0;
        while r < rows_total {
            let r1 = (r + rows_per_tile).min(rows_total);
            jobs.push((b, r, r1));
            r = r1;
        }
    }
    (jobs, wo)
}

fn n_groups(n_jobs: usize) -> usize {
    n_jobs.min((2 * rayon::current_num_threads()).max(1))
}

#[allow(clippy::too_many_arguments)]
fn fill_col(
    col: &mut [f32],
    x_sample: &[f32],
    geom: &ConvGeom,
    cin: usize,
    row0: usize,
    nrows: usize,
) {
    let [d, h, w] = geom.in_dhw;
    let [kd, kh, kw] = geom.kernel;
    let [sd, sh, sw] = geom.stride;
    let [plod, ploh, plow] = geom.pad_lo;
    let [_, ho, wo] = geom.out_dhw();
    let ncols = nrows * wo;

    let mut row_idx = 0usize;
    for ci in 0..cin {
        let chan_base = ci * d * h * w;
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    let dst_row = &mut col[row_idx * ncols..(row_idx + 1) * ncols];
                    for orow in 0..nrows {
                        let grow = row0 + orow;
                        let od = grow / ho;
                        let oh = grow % ho;
                        let id = od as isize * sd as isize - plod + a as isize;
                        let ih = oh as isize * sh as isize - ploh + b as isize;
                        let dst = &mut dst_row[orow * wo..(orow + 1) * wo];
                        if id < 0 || id >= d as isize || ih < 0 || ih >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src_base = chan_base + (id as usize * h + ih as usize) * w;
                        if sw == 1 {
                            // iw = ow + shift, contiguous span copy.
                            let shift = c as isize - plow;
                            let lo = (-shift).max(0).min(wo as isize) as usize;
                            let hi = ((w as isize - shift).max(0) as usize).min(wo);
                            dst[..lo].fill(0.0);
                            if hi > lo {
                                let s0 = (lo as isize + shift) as usize;
                                dst[lo..hi]
                                    .copy_from_slice(&x_sample[src_base + s0..src_base + s0 + (hi - lo)]);
                            }
                            dst[hi.max(lo)..].fill(0.0);
                        } else {
                            for (ow, slot) in dst.iter_mut().enumerate() {
                                let iw = ow as isize * sw as isize - plow + c as isize;
                                *slot = if iw >= 0 && iw < w as isize {
                                    x_sample[src_base + iw as usize]
                                } else {
                                    0.0
                                };
                            }
                        }
                    }
                    row_idx += 1;
                }
            }
        }
    }
}

/// `y[b, co, o] = sum_{ci, k} w2[co, (ci, k)] * gather(x)[b, (ci, k), o] + bias[co]`
pub fn conv_forward(
    x: &Array5<f32>,
    w2: &Array2<f32>,
    bias: Option<&[f32]>,
    geom: &ConvGeom,
) -> Array5<f32> {
    let (batch, cin, d, h, w) = x.dim();
    assert_eq!([d, h, w], geom.in_dhw, "input shape vs geometry");
    let k_rows = cin * geom.k_volume();
    let (cout, k_cols) = w2.dim();
    assert_eq!(k_rows, k_cols, "weight matrix vs geometry");
    let [do_, ho, wo] = geom.out_dhw();
    let n_out = do_ * ho * wo;

    let mut y = Array5::<f32>::zeros((batch, cout, do_, ho, wo));
    let xs = x.as_slice().expect("contiguous input");
    let ws = w2.as_slice().expect("contiguous weights");
    let y_ptr = SendPtr(y.as_mut_ptr());

    // Pointwise fast path: the col matrix is the input itself.
    if geom.k_volume() == 1
        && geom.stride == [1, 1, 1]
        && geom.pad_lo == [0; 3]
        && geom.pad_hi == [0; 3]
    {
        (0..batch).into_par_iter().for_each(|b| {
            let y_ptr = &y_ptr;
            unsafe {
                let c = y_ptr.0.add(b * cout * n_out);
                matrixmultiply::sgemm(
                    cout,
                    k_rows,
                    n_out,
                    1.0,
                    ws.as_ptr(),
                    k_rows as isize,
                    1,
                    xs.as_ptr().add(b * cin * n_out),
                    n_out as isize,
                    1,
                    0.0,
                    c,
                    n_out as isize,
                    1,
                );
            }
        });
    } else {
        let (jobs, _) = make_jobs(batch, geom, k_rows);
        let groups = n_groups(jobs.len());
        let per = jobs.len().div_ceil(groups);
        jobs.par_chunks(per).for_each(|chunk| {
            let y_ptr = &y_ptr;
            let mut col: Vec<f32> = Vec::new();
            for &(b, r0, r1) in chunk {
                let nrows = r1 - r0;
                let ncols = nrows * wo;
                col.resize(k_rows * ncols, 0.0);
                fill_col(
                    &mut col,
                    &xs[b * cin * d * h * w..(b + 1) * cin * d * h * w],
                    geom,
                    cin,
                    r0,
                    nrows,
                );
                unsafe {
                    let c = y_ptr.0.add(b * cout * n_out + r0 * wo);
                    matrixmultiply::sgemm(
                        cout,
                        k_rows,
                        ncols,
                        1.0,
                        ws.as_ptr(),
                        k_rows as isize,
                        1,
                        col.as_ptr(),
                        ncols as isize,
                        1,
                        0.0,
                        c,
                        n_out as isize,
                        1,
                    );
                }
            }
        });
    }

    if let Some(bias) = bias {
        let ys = y.as_slice_mut().expect("contiguous output");
        ys.par_chunks_mut(n_out).enumerate().for_each(|(i, chunk)| {
            let bv = bias[i % cout];
            for v in chunk {
                *v += bv;
            }
        });
    }
    y
}

/// Weight gradient of the gather: `out[ca, (cb, k)] = sum_{batch, o} a[b, ca, o] * gather(x)[b, (cb, k), o]`.
pub fn conv_grad_weights(a: &Array5<f32>, x: &Array5<f32>, geom: &ConvGeom) -> Array2<f32> {
    let (batch, cb, d, h, w) = x.dim();
    assert_eq!([d, h, w], geom.in_dhw);
    let (batch_a, ca, ad, ah, aw) = a.dim();
    assert_eq!(batch, batch_a);
    assert_eq!([ad, ah, aw], geom.out_dhw(), "operand shape vs geometry");
    let k_rows = cb * geom.k_volume();
    let n_out = ad * ah * aw;
    let wo = aw;

    let xs = x.as_slice().expect("contiguous input");
    let asl = a.as_slice().expect("contiguous operand");

    let (jobs, _) = make_jobs(batch, geom, k_rows);
    let groups = n_groups(jobs.len());
    let per = jobs.len().div_ceil(groups);

    let partials: Vec<Array2<f32>> = jobs
        .par_chunks(per)
        .map(|chunk| {
            let mut acc = Array2::<f32>::zeros((ca, k_rows));
            let acc_ptr = acc.as_mut_ptr();
            let mut col: Vec<f32> = Vec::new();
            for &(b, r0, r1) in chunk {
                let nrows = r1 - r0;
                let ncols = nrows * wo;
                col.resize(k_rows * ncols, 0.0);
                fill_col(
                    &mut col,
                    &xs[b * cb * d * h * w..(b + 1) * cb * d * h * w],
                    geom,
                    cb,
                    r0,
                    nrows,
                );
                unsafe {
                    // acc += a_tile (ca x ncols) * col^T (ncols x k_rows)
                    matrixmultiply::sgemm(
                        ca,
                        ncols,
                        k_rows,
                        1.0,
                        asl.as_ptr().add(b * ca * n_out + r0 * wo),
                        n_out as isize,
                        1,
                        col.as_ptr(),
                        1,
                        ncols as isize,
                        1.0,
                        acc_ptr,
                        k_rows as isize,
                        1,
                    );
                }
            }
            acc
        })
        .collect();

    let mut total = Array2::<f32>::zeros((ca, k_rows));
    for p in partials {
        total += &p;
    }
    total
}

/// Per-channel sum over batch and spatial positions (bias gradients).
pub fn sum_per_channel(a: &Array5<f32>) -> Vec<f32> {
    let (batch, c, d, h, w) = a.dim();
    let n = d * h * w;
    let asl = a.as_slice().expect("contiguous");
    (0..c)
        .into_par_iter()
        .map(|ch| {
            let mut acc = 0.0f64;
            for b in 0..batch {
                let base = (b * c + ch) * n;
                for &v in &asl[base..base + n] {
                    acc += v as f64;
                }
            }
            acc as f32
        })
        .collect()
}
