//! Finite-difference checks of every layer's analytic gradients on small
//! random cases. Structural mistakes (index or formula errors) show up as
//! O(1) discrepancies; the tolerances leave room for f32 rounding only.

mod common;

use common::rand_array5;
use ndarray::Array5;
use plume_nn::convlstm::ConvLstm3d;
use plume_nn::layers::{ActLayer, Activation, BatchNorm3d, Conv3d, ConvTranspose3d, Dropout3d, MaxPool3d};
use plume_nn::Param;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn loss_of(y: &Array5<f32>, r: &Array5<f32>) -> f64 {
    y.iter().zip(r.iter()).map(|(a, b)| (a * b) as f64).sum()
}

/// Central finite difference of `f` with respect to one slot of a tensor.
fn fd_slot(value: &mut f32, h: f32, mut f: impl FnMut() -> f64) -> f64 {
    let orig = *value;
    *value = orig + h;
    let fp = f();
    *value = orig - h;
    let fm = f();
    *value = orig;
    (fp - fm) / (2.0 * h as f64)
}

fn check_param_grads(
    param: &Param,
    analytic: &Param,
    probe: &[usize],
    mut numeric: impl FnMut(usize) -> f64,
    label: &str,
) {
    for &i in probe {
        let num = numeric(i);
        let ana = analytic.grad.as_slice().unwrap()[i] as f64;
        let denom = num.abs().max(ana.abs()).max(1e-2);
        assert!(
            ((num - ana) / denom).abs() < 3e-2,
            "{label}[{i}] ({}): analytic {ana:.5e} vs numeric {num:.5e}",
            param.name
        );
    }
}

#[test]
fn conv3d_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut layer = Conv3d::new("c", 2, 3, [3, 3, 3], [1, 1, 1], [1, 1, 1], &mut rng);
    let x = rand_array5((2, 2, 4, 4, 4), &mut rng);
    let r = rand_array5((2, 3, 4, 4, 4), &mut rng);

    let y = layer.forward_t(x.clone());
    let dx = layer.backward(&r);
    let _ = loss_of(&y, &r);

    // Input gradient.
    let mut xp = x.clone();
    for &i in &[0usize, 17, 63, 100] {
        let num = {
            let slot_ptr: *mut f32 = &mut xp.as_slice_mut().unwrap()[i];
            let layer_ref = &layer;
            fd_slot(unsafe { &mut *slot_ptr }, 1e-3, || {
                loss_of(&layer_ref.infer(&xp), &r)
            })
        };
        let ana = dx.as_slice().unwrap()[i] as f64;
        let denom = num.abs().max(ana.abs()).max(1e-2);
        assert!(
            ((num - ana) / denom).abs() < 3e-2,
            "dx[{i}]: analytic {ana:.5e} vs numeric {num:.5e}"
        );
    }

    // Weight and bias gradients.
    let probes = [0usize, 5, 40, 120];
    let w_snapshot = layer.w.clone();
    for &i in &probes {
        let num = {
            let base = layer.w.value.as_slice().unwrap()[i];
            layer.w.value.as_slice_mut().unwrap()[i] = base + 1e-3;
            let fp = loss_of(&layer.infer(&x), &r);
            layer.w.value.as_slice_mut().unwrap()[i] = base - 1e-3;
            let fm = loss_of(&layer.infer(&x), &r);
            layer.w.value.as_slice_mut().unwrap()[i] = base;
            (fp - fm) / 2e-3
        };
        let ana = w_snapshot.grad.as_slice().unwrap()[i] as f64;
        let denom = num.abs().max(ana.abs()).max(1e-2);
        assert!(
            ((num - ana) / denom).abs() < 3e-2,
            "dw[{i}]: analytic {ana:.5e} vs numeric {num:.5e}"
        );
    }
    let num_db = {
        let base = layer.b.value.as_slice().unwrap()[1];
        layer.b.value.as_slice_mut().unwrap()[1] = base + 1e-3;
        let fp = loss_of(&layer.infer(&x), &r);
        layer.b.value.as_slice_mut().unwrap()[1] = base - 1e-3;
        let fm = loss_of(&layer.infer(&x), &r);
        layer.b.value.as_slice_mut().unwrap()[1] = base;
        (fp - fm) / 2e-3
    };
    let ana = layer.b.grad.as_slice().unwrap()[1] as f64;
    let denom = num_db.abs().max(ana.abs()).max(1e-2);
    assert!(((num_db - ana) / denom).abs() < 3e-2, "db: {ana} vs {num_db}");
}

#[test]
fn deconv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut layer =
        ConvTranspose3d::new("t", 3, 2, [3, 3, 3], [1, 2, 2], [1, 1, 1], [0, 1, 1], &mut rng);
    let x = rand_array5((1, 3, 3, 4, 4), &mut rng);
    let y = layer.forward_t(x.clone());
    let (_, _, od, oh, ow) = y.dim();
    let r = rand_array5((1, 2, od, oh, ow), &mut rng);
    let dx = layer.backward(&r);

    let mut xp = x.clone();
    for &i in &[0usize, 21, 47, 95] {
        let num = {
            let slot_ptr: *mut f32 = &mut xp.as_slice_mut().unwrap()[i];
            let layer_ref = &layer;
            fd_slot(unsafe { &mut *slot_ptr }, 1e-3, || {
                loss_of(&layer_ref.infer(&xp), &r)
            })
        };
        let ana = dx.as_slice().unwrap()[i] as f64;
        let denom = num.abs().max(ana.abs()).max(1e-2);
        assert!(
            ((num - ana) / denom).abs() < 3e-2,
            "deconv dx[{i}]: analytic {ana:.5e} vs numeric {num:.5e}"
        );
    }

    let w_grad_snapshot: Vec<f32> = layer.w.grad.iter().cloned().collect();
    for &i in &[0usize, 11, 52, 101] {
        let num = {
            let base = layer.w.value.as_slice().unwrap()[i];
            layer.w.value.as_slice_mut().unwrap()[i] = base + 1e-3;
            let fp = loss_of(&layer.infer(&x), &r);
            layer.w.value.as_slice_mut().unwrap()[i] = base - 1e-3;
            let fm = loss_of(&layer.infer(&x), &r);
            layer.w.value.as_slice_mut().unwrap()[i] = base;
            (fp - fm) / 2e-3
        };
        let ana = w_grad_snapshot[i] as f64;
        let denom = num.abs().max(ana.abs()).max(1e-2);
        assert!(
            ((num - ana) / denom).abs() < 3e-2,
            "deconv dw[{i}]: analytic {ana:.5e} vs numeric {num:.5e}"
        );
    }
}

#[test]
fn batchnorm_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for act in [Activation::Relu, Activation::LeakyRelu(0.01), Activation::Linear] {
        let mut layer = BatchNorm3d::new("bn", 3, act);
        // Non-trivial affine parameters.
        for (i, g) in layer.gamma.value.iter_mut().enumerate() {
            *g = 0.8 + 0.2 * i as f32;
        }
        for (i, b) in layer.beta.value.iter_mut().enumerate() {
            *b = 0.1 * i as f32 - 0.1;
        }
        let x = rand_array5((2, 3, 3, 4, 4), &mut rng);
        let r = rand_array5((2, 3, 3, 4, 4), &mut rng);

        let _y = layer.forward_t(x.clone());
        let dx = layer.backward(&r);

        // FD through the training-mode forward (batch statistics included).
        let mut probe_layer = BatchNorm3d::new("bn2", 3, act);
        probe_layer.gamma.value.assign(&layer.gamma.value);
        probe_layer.beta.value.assign(&layer.beta.value);
        let mut xp = x.clone();
        for &i in &[0usize, 30, 77, 140] {
            let base = xp.as_slice().unwrap()[i];
            xp.as_slice_mut().unwrap()[i] = base + 1e-3;
            let fp = loss_of(&probe_layer.forward_t(xp.clone()), &r);
            xp.as_slice_mut().unwrap()[i] = base - 1e-3;
            let fm = loss_of(&probe_layer.forward_t(xp.clone()), &r);
            xp.as_slice_mut().unwrap()[i] = base;
            let num = (fp - fm) / 2e-3;
            let ana = dx.as_slice().unwrap()[i] as f64;
            let denom = num.abs().max(ana.abs()).max(1e-2);
            assert!(
                ((num - ana) / denom).abs() < 3e-2,
                "{act:?} bn dx[{i}]: analytic {ana:.5e} vs numeric {num:.5e}"
            );
        }

        // Gamma/beta.
        for ch in 0..3 {
            let base = probe_layer.gamma.value[ch];
            probe_layer.gamma.value[ch] = base + 1e-3;
            let fp = loss_of(&probe_layer.forward_t(x.clone()), &r);
            probe_layer.gamma.value[ch] = base - 1e-3;
            let fm = loss_of(&probe_layer.forward_t(x.clone()), &r);
            probe_layer.gamma.value[ch] = base;
            let num = (fp - fm) / 2e-3;
            let ana = layer.gamma.grad[ch] as f64;
            let denom = num.abs().max(ana.abs()).max(1e-2);
            assert!(
                ((num - ana) / denom).abs() < 3e-2,
                "{act:?} dgamma[{ch}]: {ana:.5e} vs {num:.5e}"
            );
        }
    }
}

#[test]
fn maxpool_routes_gradient_to_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut pool = MaxPool3d::new([2, 2, 2]);
    let x = rand_array5((2, 2, 4, 4, 4), &mut rng);
    let y = pool.forward_t(x.clone());
    let r = rand_array5((2, 2, 2, 2, 2), &mut rng);
    let dx = pool.backward(&r);

    // Each window's gradient lands on its max element only.
    let mut total_in = 0.0f64;
    for v in dx.iter() {
        total_in += *v as f64;
    }
    let total_out: f64 = r.iter().map(|&v| v as f64).sum();
    assert!((total_in - total_out).abs() < 1e-5);
    // Perturbing the argmax element changes the output; others do not.
    let _ = y;
    let nonzero = dx.iter().filter(|&&v| v != 0.0).count();
    assert_eq!(nonzero, r.len());
}

#[test]
fn dropout_is_channelwise_and_scales() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut drop = Dropout3d::new(0.5);
    let x = Array5::<f32>::ones((4, 8, 2, 2, 2));
    let y = drop.forward_t(x.clone(), &mut rng);
    for b in 0..4 {
        for c in 0..8 {
            let v0 = y[(b, c, 0, 0, 0)];
            assert!(v0 == 0.0 || (v0 - 2.0).abs() < 1e-6);
            for z in 0..2 {
                for yy in 0..2 {
                    for xx in 0..2 {
                        assert_eq!(y[(b, c, z, yy, xx)], v0, "whole channel shares the mask");
                    }
                }
            }
        }
    }
    // Backward applies the same mask.
    let dy = Array5::<f32>::ones((4, 8, 2, 2, 2));
    let dx = drop.backward(&dy);
    for (a, b) in dx.iter().zip(y.iter()) {
        assert_eq!(*a, *b);
    }
    // Eval is the identity.
    assert_eq!(drop.infer(&x), x);
}

#[test]
fn act_layer_backward_uses_output_sign() {
    let mut layer = ActLayer::new(Activation::LeakyRelu(0.01));
    let x = Array5::from_shape_fn((1, 1, 1, 1, 4), |(_, _, _, _, i)| [1.5f32, -2.0, 0.5, -0.1][i]);
    let _y = layer.forward_t(x);
    let dy = Array5::<f32>::ones((1, 1, 1, 1, 4));
    let dx = layer.backward(&dy);
    assert_eq!(dx[(0, 0, 0, 0, 0)], 1.0);
    assert!((dx[(0, 0, 0, 0, 1)] - 0.01).abs() < 1e-7);
    assert_eq!(dx[(0, 0, 0, 0, 2)], 1.0);
    assert!((dx[(0, 0, 0, 0, 3)] - 0.01).abs() < 1e-7);
}

#[test]
fn convlstm_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let mut cell = ConvLstm3d::new("lstm", 2, 3, &mut rng);
    let xs: Vec<Array5<f32>> = (0..3).map(|_| rand_array5((1, 2, 2, 3, 3), &mut rng)).collect();
    let h = cell.forward_t(xs.clone());
    let r = rand_array5(h.dim(), &mut rng);
    let dxs = cell.backward(&r);

    // Input gradients at a few slots of each step.
    for (t, dx) in dxs.iter().enumerate() {
        let mut xsp = xs.clone();
        for &i in &[0usize, 9, 20] {
            let base = xsp[t].as_slice().unwrap()[i];
            xsp[t].as_slice_mut().unwrap()[i] = base + 1e-2;
            let fp = loss_of(&cell.infer(&xsp), &r);
            xsp[t].as_slice_mut().unwrap()[i] = base - 1e-2;
            let fm = loss_of(&cell.infer(&xsp), &r);
            xsp[t].as_slice_mut().unwrap()[i] = base;
            let num = (fp - fm) / 2e-2;
            let ana = dx.as_slice().unwrap()[i] as f64;
            let denom = num.abs().max(ana.abs()).max(1e-2);
            assert!(
                ((num - ana) / denom).abs() < 5e-2,
                "lstm dx[t={t}][{i}]: analytic {ana:.5e} vs numeric {num:.5e}"
            );
        }
    }

    // Weight gradients.
    let wx_grad: Vec<f32> = cell.w_x.grad.iter().cloned().collect();
    for &i in &[0usize, 33, 150] {
        let base = cell.w_x.value.as_slice().unwrap()[i];
        cell.w_x.value.as_slice_mut().unwrap()[i] = base + 1e-2;
        let fp = loss_of(&cell.infer(&xs), &r);
        cell.w_x.value.as_slice_mut().unwrap()[i] = base - 1e-2;
        let fm = loss_of(&cell.infer(&xs), &r);
        cell.w_x.value.as_slice_mut().unwrap()[i] = base;
        let num = (fp - fm) / 2e-2;
        let ana = wx_grad[i] as f64;
        let denom = num.abs().max(ana.abs()).max(1e-2);
        assert!(
            ((num - ana) / denom).abs() < 5e-2,
            "lstm dwx[{i}]: analytic {ana:.5e} vs numeric {num:.5e}"
        );
    }
}
