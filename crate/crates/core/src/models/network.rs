//! Forward and reverse passes for the two architectures.

use ndarray::{Array2, Array4, ArrayView1, ArrayView2, ArrayView4, ArrayViewMut1, ArrayViewMut2, ArrayViewMut4, Axis, Dimension};

use super::layers::*;
use super::{Activation, ArchSpec, Tensor};
use crate::{Error, Result};

pub(crate) struct Forward {
    pub out: Array2<f64>,
    trace: Trace,
}

enum Trace {
    Automap(AutomapTrace),
    Unet(UnetTrace),
}

struct AutomapTrace {
    xs: Array2<f64>,
    h1: Array2<f64>,
    h2: Array4<f64>,
    c1: Array4<f64>,
    c1_masked: Option<Array4<f64>>,
    masks: Option<Array4<f64>>,
    c2: Array4<f64>,
    out: Array4<f64>,
}

struct UnetTrace {
    xs: Array4<f64>,
    a1: Array4<f64>,
    a2: Array4<f64>,
    p1: Array4<f64>,
    a3: Array4<f64>,
    p2: Array4<f64>,
    a4: Array4<f64>,
    cat2: Array4<f64>,
    a5: Array4<f64>,
    cat1: Array4<f64>,
    a6: Array4<f64>,
    r: Array4<f64>,
}

/// Loss pieces and gradients for one chunk of a minibatch (no l2 term).
pub(crate) struct Partial {
    pub data_loss: f64,
    pub l1_penalty: f64,
    pub grads: Vec<Vec<f64>>,
}

fn v1(t: &Tensor) -> ArrayView1<'_, f64> {
    ArrayView1::from(&t.data[..])
}

fn v2(t: &Tensor) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((t.shape[0], t.shape[1]), &t.data).expect("rank-2 tensor")
}

fn v4(t: &Tensor) -> ArrayView4<'_, f64> {
    let s = &t.shape;
    ArrayView4::from_shape((s[0], s[1], s[2], s[3]), &t.data).expect("rank-4 tensor")
}

/// Mutable views of weight `i` and its bias `i + 1`.
fn grad_pair<'a>(g: &'a mut [Vec<f64>], params: &[Tensor], i: usize) -> (&'a mut Vec<f64>, ArrayViewMut1<'a, f64>, Vec<usize>) {
    let (lo, hi) = g.split_at_mut(i + 1);
    (&mut lo[i], ArrayViewMut1::from(&mut hi[0][..]), params[i].shape.clone())
}

fn gm2<'a>(g: &'a mut [f64], s: &[usize]) -> ArrayViewMut2<'a, f64> {
    ArrayViewMut2::from_shape((s[0], s[1]), g).expect("rank-2 grad")
}

fn gm4<'a>(g: &'a mut [f64], s: &[usize]) -> ArrayViewMut4<'a, f64> {
    ArrayViewMut4::from_shape((s[0], s[1], s[2], s[3]), g).expect("rank-4 grad")
}

fn activate<D: Dimension>(a: &mut ndarray::Array<f64, D>, act: Activation, layer: &str) -> Result<()> {
    act.apply_in_place(a.iter_mut());
    if all_finite(a.iter()) {
        Ok(())
    } else {
        Err(Error::NonFinite { layer: layer.to_string() })
    }
}

fn backprop<D: Dimension>(act: Activation, out: &ndarray::Array<f64, D>, grad: &mut ndarray::Array<f64, D>) {
    act.backprop(out.iter(), grad.iter_mut());
}

fn to_image_batch(a: Array2<f64>, n: usize) -> Array4<f64> {
    let b = a.nrows();
    a.into_shape_with_order((b, 1, n, n)).expect("n² columns")
}

fn to_rows(a: Array4<f64>) -> Array2<f64> {
    let (b, c, h, w) = a.dim();
    a.into_shape_with_order((b, c * h * w)).expect("contiguous activations")
}

fn masks_array(masks: &[Vec<f64>], c: usize, n: usize) -> Array4<f64> {
    let flat: Vec<f64> = masks.iter().flatten().copied().collect();
    Array4::from_shape_vec((masks.len(), c, n, n), flat).expect("mask per sample")
}

pub(crate) fn forward(spec: &ArchSpec, params: &[Tensor], x: &Array2<f64>, masks: Option<&[Vec<f64>]>) -> Result<Forward> {
    if spec.is_automap() {
        let t = automap_forward(spec, params, x, masks)?;
        let out = to_rows(t.out.clone());
        Ok(Forward { out, trace: Trace::Automap(t) })
    } else {
        let t = unet_forward(spec, params, x)?;
        let out = to_rows(&t.xs / spec.input_scale + &t.r);
        if !all_finite(out.iter()) {
            return Err(Error::NonFinite { layer: "residual".into() });
        }
        Ok(Forward { out, trace: Trace::Unet(t) })
    }
}

/// Conv1 activations of a single input (everything before the dropout site).
pub(crate) fn automap_prefix(spec: &ArchSpec, params: &[Tensor], x: &Array2<f64>) -> Result<Array4<f64>> {
    let acts = &spec.activations;
    let xs = x * spec.input_scale;
    let mut h1 = dense_forward(&xs, v2(&params[0]), v1(&params[1]));
    activate(&mut h1, acts[0], "fc1")?;
    let mut h2 = dense_forward(&h1, v2(&params[2]), v1(&params[3]));
    activate(&mut h2, acts[1], "fc2")?;
    let h2 = to_image_batch(h2, spec.n);
    let mut c1 = conv_forward(&h2, v4(&params[4]), v1(&params[5]));
    activate(&mut c1, acts[2], "conv1")?;
    Ok(c1)
}

/// Continues a single-sample prefix once per dropout mask.
pub(crate) fn automap_suffix(spec: &ArchSpec, params: &[Tensor], prefix: &Array4<f64>, masks: &[Vec<f64>]) -> Result<Array2<f64>> {
    let m = masks_array(masks, spec.conv_filters, spec.n);
    let c1 = &m * &prefix.index_axis(Axis(0), 0);
    let (c2, out) = automap_tail(spec, params, &c1)?;
    drop(c2);
    Ok(to_rows(out))
}

fn automap_tail(spec: &ArchSpec, params: &[Tensor], c1: &Array4<f64>) -> Result<(Array4<f64>, Array4<f64>)> {
    let acts = &spec.activations;
    let mut c2 = conv_forward(c1, v4(&params[6]), v1(&params[7]));
    activate(&mut c2, acts[3], "conv2")?;
    let flipped = transpose_kernel(v4(&params[8]));
    let mut out = conv_forward(&c2, flipped.view(), v1(&params[9]));
    activate(&mut out, acts[4], "convt")?;
    Ok((c2, out))
}

fn automap_forward(spec: &ArchSpec, params: &[Tensor], x: &Array2<f64>, masks: Option<&[Vec<f64>]>) -> Result<AutomapTrace> {
    let acts = &spec.activations;
    let xs = x * spec.input_scale;
    let mut h1 = dense_forward(&xs, v2(&params[0]), v1(&params[1]));
    activate(&mut h1, acts[0], "fc1")?;
    let mut h2 = dense_forward(&h1, v2(&params[2]), v1(&params[3]));
    activate(&mut h2, acts[1], "fc2")?;
    let h2 = to_image_batch(h2, spec.n);
    let mut c1 = conv_forward(&h2, v4(&params[4]), v1(&params[5]));
    activate(&mut c1, acts[2], "conv1")?;
    let masks = masks.map(|m| masks_array(m, spec.conv_filters, spec.n));
    let c1_masked = masks.as_ref().map(|m| &c1 * m);
    let (c2, out) = automap_tail(spec, params, c1_masked.as_ref().unwrap_or(&c1))?;
    Ok(AutomapTrace { xs, h1, h2, c1, c1_masked, masks, c2, out })
}

fn automap_backward(spec: &ArchSpec, params: &[Tensor], t: &AutomapTrace, dout: Array2<f64>, l1_gamma: f64, g: &mut [Vec<f64>]) {
    let acts = &spec.activations;
    let mut d = to_image_batch(dout, spec.n);
    backprop(acts[4], &t.out, &mut d);

    let flipped = transpose_kernel(v4(&params[8]));
    let mut dflip = Array4::zeros(flipped.dim());
    let (gw, gb, s) = grad_pair(g, params, 8);
    let mut dc2 = conv_backward(&t.c2, flipped.view(), &d, dflip.view_mut(), gb, true).expect("input grad");
    untranspose_grad(&dflip, gm4(gw, &s));

    if l1_gamma > 0.0 {
        dc2.zip_mut_with(&t.c2, |g, a| *g += l1_gamma * a.signum() * f64::from(*a != 0.0));
    }
    backprop(acts[3], &t.c2, &mut dc2);
    let (gw, gb, s) = grad_pair(g, params, 6);
    let c1_in = t.c1_masked.as_ref().unwrap_or(&t.c1);
    let mut dc1 = conv_backward(c1_in, v4(&params[6]), &dc2, gm4(gw, &s), gb, true).expect("input grad");
    if let Some(m) = &t.masks {
        dc1 *= m;
    }
    backprop(acts[2], &t.c1, &mut dc1);
    let (gw, gb, s) = grad_pair(g, params, 4);
    let dh2 = conv_backward(&t.h2, v4(&params[4]), &dc1, gm4(gw, &s), gb, true).expect("input grad");

    let mut dh2 = to_rows(dh2);
    let h2_rows = t.h2.view().into_shape_with_order(dh2.dim()).expect("rows").to_owned();
    backprop(acts[1], &h2_rows, &mut dh2);
    let (gw, gb, s) = grad_pair(g, params, 2);
    let mut dh1 = dense_backward(&t.h1, v2(&params[2]), &dh2, gm2(gw, &s), gb, true).expect("input grad");
    backprop(acts[0], &t.h1, &mut dh1);
    let (gw, gb, s) = grad_pair(g, params, 0);
    dense_backward(&t.xs, v2(&params[0]), &dh1, gm2(gw, &s), gb, false);
}

fn unet_forward(spec: &ArchSpec, params: &[Tensor], x: &Array2<f64>) -> Result<UnetTrace> {
    let acts = &spec.activations;
    let xs = to_image_batch(x * spec.input_scale, spec.n);
    let conv = |inp: &Array4<f64>, layer: usize, name: &str| -> Result<Array4<f64>> {
        let mut a = conv_forward(inp, v4(&params[2 * layer]), v1(&params[2 * layer + 1]));
        activate(&mut a, acts[layer], name)?;
        Ok(a)
    };
    let a1 = conv(&xs, 0, "enc1a")?;
    let a2 = conv(&a1, 1, "enc1b")?;
    let p1 = avg_pool2(&a2);
    let a3 = conv(&p1, 2, "enc2")?;
    let p2 = avg_pool2(&a3);
    let a4 = conv(&p2, 3, "bottleneck")?;
    let cat2 = concat_channels(&upsample2(&a4), &a3);
    let a5 = conv(&cat2, 4, "dec2")?;
    let cat1 = concat_channels(&upsample2(&a5), &a2);
    let a6 = conv(&cat1, 5, "dec1")?;
    let r = conv(&a6, 6, "out")?;
    Ok(UnetTrace { xs, a1, a2, p1, a3, p2, a4, cat2, a5, cat1, a6, r })
}

fn unet_backward(spec: &ArchSpec, params: &[Tensor], t: &UnetTrace, dout: Array2<f64>, l1_gamma: f64, g: &mut [Vec<f64>]) {
    let acts = &spec.activations;
    let c = spec.conv_filters;
    let mut conv_back = |input: &Array4<f64>, layer: usize, dy: &Array4<f64>, need: bool| {
        let (gw, gb, s) = grad_pair(g, params, 2 * layer);
        conv_backward(input, v4(&params[2 * layer]), dy, gm4(gw, &s), gb, need)
    };
    let split = |d: Array4<f64>| {
        let up = d.slice(ndarray::s![.., ..c, .., ..]).to_owned();
        let skip = d.slice(ndarray::s![.., c.., .., ..]).to_owned();
        (up, skip)
    };

    let mut dr = to_image_batch(dout, spec.n);
    backprop(acts[6], &t.r, &mut dr);
    let mut da6 = conv_back(&t.a6, 6, &dr, true).expect("input grad");
    backprop(acts[5], &t.a6, &mut da6);
    let (du1, da2_skip) = split(conv_back(&t.cat1, 5, &da6, true).expect("input grad"));
    let mut da5 = upsample2_backward(&du1);
    backprop(acts[4], &t.a5, &mut da5);
    let (du2, da3_skip) = split(conv_back(&t.cat2, 4, &da5, true).expect("input grad"));
    let mut da4 = upsample2_backward(&du2);
    backprop(acts[3], &t.a4, &mut da4);
    let dp2 = conv_back(&t.p2, 3, &da4, true).expect("input grad");
    let mut da3 = avg_pool2_backward(&dp2) + &da3_skip;
    backprop(acts[2], &t.a3, &mut da3);
    let dp1 = conv_back(&t.p1, 2, &da3, true).expect("input grad");
    let mut da2 = avg_pool2_backward(&dp1) + &da2_skip;
    if l1_gamma > 0.0 {
        da2.zip_mut_with(&t.a2, |g, a| *g += l1_gamma * a.signum() * f64::from(*a != 0.0));
    }
    backprop(acts[1], &t.a2, &mut da2);
    let mut da1 = conv_back(&t.a1, 1, &da2, true).expect("input grad");
    backprop(acts[0], &t.a1, &mut da1);
    conv_back(&t.xs, 0, &da1, false);
}

pub(crate) fn loss_and_grad(
    spec: &ArchSpec,
    params: &[Tensor],
    x: &Array2<f64>,
    ys: &[&[f64]],
    masks: Option<&[Vec<f64>]>,
    l1_gamma: f64,
) -> Result<Partial> {
    let fwd = forward(spec, params, x, masks)?;
    let mut dout = fwd.out.clone();
    let mut data_loss = 0.0;
    for (mut row, y) in dout.rows_mut().into_iter().zip(ys) {
        for (d, t) in row.iter_mut().zip(y.iter()) {
            let e = *d - t;
            data_loss += e * e;
            *d = 2.0 * e;
        }
    }
    let mut grads: Vec<Vec<f64>> = params.iter().map(|t| vec![0.0; t.data.len()]).collect();
    let l1_site = match &fwd.trace {
        Trace::Automap(t) => &t.c2,
        Trace::Unet(t) => &t.a2,
    };
    let l1_penalty = l1_gamma * l1_site.iter().map(|a| a.abs()).sum::<f64>();
    match &fwd.trace {
        Trace::Automap(t) => automap_backward(spec, params, t, dout, l1_gamma, &mut grads),
        Trace::Unet(t) => unet_backward(spec, params, t, dout, l1_gamma, &mut grads),
    }
    for (t, g) in params.iter().zip(&grads) {
        if !all_finite(g.iter()) {
            return Err(Error::NonFinite { layer: format!("{} (gradient)", t.name) });
        }
    }
    if !data_loss.is_finite() {
        return Err(Error::NonFinite { layer: "output".into() });
    }
    Ok(Partial { data_loss, l1_penalty, grads })
}
