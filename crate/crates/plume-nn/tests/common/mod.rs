//! Slow reference kernels and helpers shared by the correctness tests.
#![allow(dead_code)]

use ndarray::Array5;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Direct-loop convolution for an explicit geometry.
pub fn naive_conv3d_geom(
    x: &Array5<f32>,
    w: &Array5<f32>,
    bias: Option<&[f32]>,
    geom: &plume_nn::conv::ConvGeom,
) -> Array5<f32> {
    let (bsz, cin, d, h, wd) = x.dim();
    let (cout, cin_w, kd, kh, kw) = w.dim();
    assert_eq!(cin, cin_w);
    assert_eq!([d, h, wd], geom.in_dhw);
    assert_eq!([kd, kh, kw], geom.kernel);
    let [od, oh, ow] = geom.out_dhw();
    let [sd, sh, sw] = geom.stride;
    let [plod, ploh, plow] = geom.pad_lo;

    let mut y = Array5::<f32>::zeros((bsz, cout, od, oh, ow));
    for b in 0..bsz {
        for co in 0..cout {
            for zo in 0..od {
                for yo in 0..oh {
                    for xo in 0..ow {
                        let mut acc = bias.map(|bb| bb[co] as f64).unwrap_or(0.0);
                        for ci in 0..cin {
                            for a in 0..kd {
                                let iz = zo as isize * sd as isize - plod + a as isize;
                                if iz < 0 || iz >= d as isize {
                                    continue;
                                }
                                for bb in 0..kh {
                                    let iy = yo as isize * sh as isize - ploh + bb as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for cc in 0..kw {
                                        let ix = xo as isize * sw as isize - plow + cc as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        acc += w[(co, ci, a, bb, cc)] as f64
                                            * x[(b, ci, iz as usize, iy as usize, ix as usize)]
                                                as f64;
                                    }
                                }
                            }
                        }
                        y[(b, co, zo, yo, xo)] = acc as f32;
                    }
                }
            }
        }
    }
    y
}

/// Direct scatter transposed convolution, the oracle for the phase path.
#[allow(clippy::too_many_arguments)]
pub fn naive_deconv3d(
    x: &Array5<f32>,
    w: &Array5<f32>, // (Cin, Cout, kd, kh, kw)
    bias: Option<&[f32]>,
    stride: [usize; 3],
    pad: [usize; 3],
    out_pad: [usize; 3],
) -> Array5<f32> {
    let (bsz, cin, d, h, wd) = x.dim();
    let (cin_w, cout, kd, kh, kw) = w.dim();
    assert_eq!(cin, cin_w);
    let od = (d - 1) * stride[0] + kd + out_pad[0] - 2 * pad[0];
    let oh = (h - 1) * stride[1] + kh + out_pad[1] - 2 * pad[1];
    let ow = (wd - 1) * stride[2] + kw + out_pad[2] - 2 * pad[2];

    let mut y = Array5::<f32>::zeros((bsz, cout, od, oh, ow));
    if let Some(bias) = bias {
        for b in 0..bsz {
            for co in 0..cout {
                y.slice_mut(ndarray::s![b, co, .., .., ..]).fill(bias[co]);
            }
        }
    }
    for b in 0..bsz {
        for ci in 0..cin {
            for iz in 0..d {
                for iy in 0..h {
                    for ix in 0..wd {
                        let v = x[(b, ci, iz, iy, ix)];
                        for a in 0..kd {
                            let oz = iz as isize * stride[0] as isize - pad[0] as isize + a as isize;
                            if oz < 0 || oz >= od as isize {
                                continue;
                            }
                            for bb in 0..kh {
                                let oy =
                                    iy as isize * stride[1] as isize - pad[1] as isize + bb as isize;
                                if oy < 0 || oy >= oh as isize {
                                    continue;
                                }
                                for cc in 0..kw {
                                    let ox = ix as isize * stride[2] as isize - pad[2] as isize
                                        + cc as isize;
                                    if ox < 0 || ox >= ow as isize {
                                        continue;
                                    }
                                    for co in 0..cout {
                                        y[(b, co, oz as usize, oy as usize, ox as usize)] +=
                                            v * w[(ci, co, a, bb, cc)];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

pub fn rand_array5(shape: (usize, usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Array5<f32> {
    Array5::from_shape_fn(shape, |_| rng.random_range(-1.0f32..1.0))
}

/// Error relative to the larger magnitude, floored at 1 so rounding noise
/// near zero is judged on an absolute scale.
pub fn max_rel_err(a: &Array5<f32>, b: &Array5<f32>) -> f64 {
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        let denom = x.abs().max(y.abs()).max(1.0) as f64;
        worst = worst.max(((x - y).abs() as f64) / denom);
    }
    worst
}
