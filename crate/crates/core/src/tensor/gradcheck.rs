//! Central finite-difference checks for every op's backward pass.

use super::{Arr, Tape, TensorId};
use crate::nn::seeded_normal;

/// Compare analytic gradients of `f` (a scalar-valued graph builder over one
/// input) against central differences.
fn check<F>(x0: Arr, f: F, h: f64, tol: f64)
where
    F: Fn(&mut Tape, TensorId) -> TensorId,
{
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone(), true);
    let loss = f(&mut tape, x);
    assert_eq!(tape.value(loss).len(), 1, "loss must be scalar");
    let grads = tape.backward(loss);
    let analytic = grads[x.0].as_ref().expect("input must receive gradient");

    let mut max_rel = 0.0f64;
    let n = x0.len();
    for i in 0..n {
        let mut xp = x0.clone();
        let mut xm = x0.clone();
        xp.as_slice_mut().unwrap()[i] += h;
        xm.as_slice_mut().unwrap()[i] -= h;
        let fp = {
            let mut t = Tape::inference();
            let xi = t.leaf(xp, false);
            let l = f(&mut t, xi);
            t.value(l)[[0]]
        };
        let fm = {
            let mut t = Tape::inference();
            let xi = t.leaf(xm, false);
            let l = f(&mut t, xi);
            t.value(l)[[0]]
        };
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.as_slice().unwrap()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        max_rel = max_rel.max((a - numeric).abs() / denom);
    }
    assert!(max_rel < tol, "max relative gradient error {max_rel} >= {tol}");
}

#[test]
fn grad_silu_gelu() {
    check(seeded_normal(&[3, 4], 1.0, 1), |t, x| {
        let y = t.silu(x);
        let z = t.gelu(y);
        t.mean_all(z)
    }, 1e-5, 1e-6);
}

#[test]
fn grad_matmul_linear() {
    let w0 = seeded_normal(&[4, 5], 0.7, 2);
    let b0 = seeded_normal(&[5], 0.5, 3);
    check(seeded_normal(&[3, 4], 1.0, 4), move |t, x| {
        let w = t.leaf(w0.clone(), false);
        let b = t.leaf(b0.clone(), false);
        let y = t.linear(x, w, b);
        let y2 = t.mul(y, y);
        t.mean_all(y2)
    }, 1e-5, 1e-6);
}

#[test]
fn grad_matmul_weight_side() {
    let x0 = seeded_normal(&[3, 4], 1.0, 5);
    check(seeded_normal(&[4, 2], 0.7, 6), move |t, w| {
        let x = t.leaf(x0.clone(), false);
        let y = t.matmul(x, w);
        let y2 = t.mul(y, y);
        t.mean_all(y2)
    }, 1e-5, 1e-6);
}

#[test]
fn grad_conv2d_input_weight_bias() {
    let w0 = seeded_normal(&[3, 2, 3, 3], 0.5, 7);
    let b0 = seeded_normal(&[3], 0.5, 8);
    // input side
    check(seeded_normal(&[2, 2, 5, 5], 1.0, 9), {
        let w0 = w0.clone();
        let b0 = b0.clone();
        move |t, x| {
            let w = t.leaf(w0.clone(), false);
            let b = t.leaf(b0.clone(), false);
            let y = t.conv2d(x, w, Some(b), 1, 1);
            let y2 = t.mul(y, y);
            t.mean_all(y2)
        }
    }, 1e-5, 1e-6);
    // weight side, stride 2
    let x0 = seeded_normal(&[1, 2, 6, 6], 1.0, 10);
    check(w0, move |t, w| {
        let x = t.leaf(x0.clone(), false);
        let b = t.leaf(b0.clone(), false);
        let y = t.conv2d(x, w, Some(b), 2, 1);
        let y2 = t.mul(y, y);
        t.mean_all(y2)
    }, 1e-5, 1e-6);
}

#[test]
fn grad_conv1x1() {
    let w0 = seeded_normal(&[4, 3, 1, 1], 0.5, 11);
    check(seeded_normal(&[2, 3, 4, 4], 1.0, 12), move |t, x| {
        let w = t.leaf(w0.clone(), false);
        let y = t.conv1x1(x, w, None);
        let y2 = t.mul(y, y);
        t.mean_all(y2)
    }, 1e-5, 1e-6);
}

#[test]
fn grad_group_norm() {
    let g0 = seeded_normal(&[4], 0.3, 13).mapv(|v| v + 1.0);
    let b0 = seeded_normal(&[4], 0.3, 14);
    check(seeded_normal(&[2, 4, 3, 3], 1.0, 15), move |t, x| {
        let g = t.leaf(g0.clone(), false);
        let b = t.leaf(b0.clone(), false);
        let y = t.group_norm(x, g, b, 2, 1e-5);
        let y3 = t.mul(y, y);
        t.mean_all(y3)
    }, 1e-5, 1e-5);
}

#[test]
fn grad_layer_norm() {
    let g0 = seeded_normal(&[6], 0.3, 16).mapv(|v| v + 1.0);
    let b0 = seeded_normal(&[6], 0.3, 17);
    check(seeded_normal(&[4, 6], 1.0, 18), move |t, x| {
        let g = t.leaf(g0.clone(), false);
        let b = t.leaf(b0.clone(), false);
        let y = t.layer_norm(x, g, b, 1e-5);
        let y3 = t.mul(y, y);
        t.mean_all(y3)
    }, 1e-5, 1e-5);
}

#[test]
fn grad_softmax() {
    check(seeded_normal(&[3, 5], 1.0, 19), |t, x| {
        let y = t.softmax_rows(x);
        let y2 = t.mul(y, y);
        t.mean_all(y2)
    }, 1e-5, 1e-5);
}

#[test]
fn grad_attention_all_sides() {
    let k0 = seeded_normal(&[5, 8], 0.8, 20);
    let v0 = seeded_normal(&[5, 8], 0.8, 21);
    check(seeded_normal(&[3, 8], 0.8, 22), {
        let k0 = k0.clone();
        let v0 = v0.clone();
        move |t, q| {
            let k = t.leaf(k0.clone(), false);
            let v = t.leaf(v0.clone(), false);
            let o = t.attention(q, k, v, 2);
            let o2 = t.mul(o, o);
            t.mean_all(o2)
        }
    }, 1e-5, 1e-5);
    let q0 = seeded_normal(&[3, 8], 0.8, 23);
    check(k0.clone(), {
        let q0 = q0.clone();
        let v0 = v0.clone();
        move |t, k| {
            let q = t.leaf(q0.clone(), false);
            let v = t.leaf(v0.clone(), false);
            let o = t.attention(q, k, v, 2);
            let o2 = t.mul(o, o);
            t.mean_all(o2)
        }
    }, 1e-5, 1e-5);
    check(v0, move |t, v| {
        let q = t.leaf(q0.clone(), false);
        let k = t.leaf(k0.clone(), false);
        let o = t.attention(q, k, v, 2);
        let o2 = t.mul(o, o);
        t.mean_all(o2)
    }, 1e-5, 1e-5);
}

#[test]
fn grad_shape_ops() {
    // concat + index + upsample + bilinear + tokens, chained
    let b0 = seeded_normal(&[2, 3, 4, 4], 1.0, 24);
    check(seeded_normal(&[2, 2, 4, 4], 1.0, 25), move |t, a| {
        let b = t.leaf(b0.clone(), false);
        let c = t.concat_channels(a, b);
        let u = t.nearest_up2(c);
        let r = t.bilinear_resize(u, 5, 7);
        let s = t.index_batch(r, 1);
        let tok = t.chw_to_tokens(s);
        let sq = t.mul(tok, tok);
        t.mean_all(sq)
    }, 1e-5, 1e-6);
}

#[test]
fn grad_rope_and_stack() {
    let pos = vec![(0usize, 0usize), (1, 2), (3, 1), (2, 2)];
    check(seeded_normal(&[4, 8], 1.0, 26), move |t, x| {
        let r = t.rope_2d(x, &pos, 10000.0);
        let sq = t.mul(r, r);
        let m1 = t.mean_all(sq);
        let m2 = t.mean_all(r);
        let rows = t.stack_rows(&[m1, m2]);
        let sq2 = t.mul(rows, rows);
        t.mean_all(sq2)
    }, 1e-5, 1e-6);
}

#[test]
fn grad_max_over_and_bias() {
    let b0 = seeded_normal(&[4, 6], 1.0, 27);
    let bias0 = seeded_normal(&[6], 1.0, 28);
    check(seeded_normal(&[4, 6], 1.0, 29), move |t, a| {
        let b = t.leaf(b0.clone(), false);
        let bias = t.leaf(bias0.clone(), false);
        let ab = t.add_bias_rows(a, bias);
        let m = t.max_over(&[ab, b]);
        let sq = t.mul(m, m);
        t.mean_all(sq)
    }, 1e-5, 1e-5);
}

#[test]
fn grad_add_channels_nc() {
    let e0 = seeded_normal(&[2, 3], 1.0, 30);
    check(seeded_normal(&[2, 3, 4, 4], 1.0, 31), move |t, x| {
        let e = t.leaf(e0.clone(), false);
        let y = t.add_channels_nc(x, e);
        let sq = t.mul(y, y);
        t.mean_all(sq)
    }, 1e-5, 1e-6);
    let x0 = seeded_normal(&[2, 3, 4, 4], 1.0, 32);
    check(seeded_normal(&[2, 3], 1.0, 33), move |t, e| {
        let x = t.leaf(x0.clone(), false);
        let y = t.add_channels_nc(x, e);
        let sq = t.mul(y, y);
        t.mean_all(sq)
    }, 1e-5, 1e-6);
}

#[test]
fn grad_losses() {
    let target = seeded_normal(&[2, 3, 2, 2], 1.0, 34);
    check(seeded_normal(&[2, 3, 2, 2], 1.0, 35), {
        let target = target.clone();
        move |t, x| t.mse_to_const(x, &target)
    }, 1e-5, 1e-6);

    // cosine against a unit-normalized target
    let raw = seeded_normal(&[2, 4, 2, 2], 1.0, 36);
    let mut unit = ndarray::ArrayD::<f64>::zeros(raw.raw_dim());
    for ni in 0..2 {
        let (u, _) =
            super::loss::l2_normalize_positions(&raw.index_axis(ndarray::Axis(0), ni).to_owned());
        unit.index_axis_mut(ndarray::Axis(0), ni).assign(&u);
    }
    check(seeded_normal(&[2, 4, 2, 2], 1.0, 37), move |t, x| {
        let c = t.cosine_mean_to_unit_const(x, &unit);
        // loss = 1 - cos
        let neg = t.scale(c, -1.0);
        t.add_const(neg, 1.0)
    }, 1e-5, 1e-6);
}

#[test]
fn grad_sum_rows_reshape() {
    check(seeded_normal(&[3, 4], 1.0, 38), |t, x| {
        let s = t.sum_rows(x);
        let r = t.reshape(s, &[2, 2]);
        let sq = t.mul(r, r);
        t.mean_all(sq)
    }, 1e-5, 1e-6);
}
