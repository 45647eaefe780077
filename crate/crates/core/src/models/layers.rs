//! Batched forward/backward kernels. Activations are `[batch, channels, h, w]`
//! for convolutional stages and `[batch, features]` for dense ones.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView4, ArrayViewMut1, Axis};
use rand::Rng;
use super::Activation;

use crate::seed;

impl Activation {
    pub(crate) fn apply_in_place<'a>(self, values: impl Iterator<Item = &'a mut f64>) {
        match self {
            Activation::Identity => {}
            Activation::Tanh => values.for_each(|v| *v = v.tanh()),
            Activation::Relu => values.for_each(|v| *v = v.max(0.0)),
        }
    }

    /// Multiplies `grad` by the derivative, expressed through the activation output.
    pub(crate) fn backprop<'a>(
        self,
        output: impl Iterator<Item = &'a f64>,
        grad: impl Iterator<Item = &'a mut f64>,
    ) {
        match self {
            Activation::Identity => {}
            Activation::Tanh => grad.zip(output).for_each(|(g, y)| *g *= 1.0 - y * y),
            Activation::Relu => grad.zip(output).for_each(|(g, y)| {
                if *y <= 0.0 {
                    *g = 0.0
                }
            }),
        }
    }
}

pub(crate) fn dense_forward(x: &Array2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let mut y = Array2::zeros((x.nrows(), w.ncols()));
    for mut row in y.rows_mut() {
        row.assign(&b);
    }
    general_mat_mul(1.0, x, &w, 1.0, &mut y);
    y
}

/// Returns the input gradient when `need_input_grad`; accumulates into `dw`, `db`.
pub(crate) fn dense_backward(
    x: &Array2<f64>,
    w: ArrayView2<f64>,
    dy: &Array2<f64>,
    mut dw: ndarray::ArrayViewMut2<f64>,
    mut db: ArrayViewMut1<f64>,
    need_input_grad: bool,
) -> Option<Array2<f64>> {
    general_mat_mul(1.0, &x.t(), dy, 1.0, &mut dw);
    db += &dy.sum_axis(Axis(0));
    need_input_grad.then(|| dy.dot(&w.t()))
}

/// Unfolds one `[c, h, w]` sample into `[c·k·k, h·w]` patches with zero
/// padding `k/2`, overwriting every entry of `cols`.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let pad = k / 2;
    let hw = h * w;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for dy in 0..k {
            for dx in 0..k {
                let r = (ch * k + dy) * k + dx;
                let row = &mut cols[r * hw..(r + 1) * hw];
                let x_lo = pad.saturating_sub(dx);
                let x_hi = (w + pad).saturating_sub(dx).min(w);
                for y in 0..h {
                    let out = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + dy as isize - pad as isize;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..x_lo].fill(0.0);
                    out[x_lo..x_hi].copy_from_slice(&src[x_lo + dx - pad..x_hi + dx - pad]);
                    out[x_hi..].fill(0.0);
                }
            }
        }
    }
}

/// Stride-1 "same" cross-correlation. `w` is `[out, in, k, k]`.
pub(crate) fn conv_forward(x: &Array4<f64>, w: ArrayView4<f64>, b: ArrayView1<f64>) -> Array4<f64> {
    let (batch, c, h, wd) = x.dim();
    let (o, _, k, _) = w.dim();
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let wmat = w.into_shape_with_order((o, c * k * k)).expect("conv weight layout");
    let mut y = Array4::zeros((batch, o, h, wd));
    let mut cols = Array2::zeros((c * k * k, h * wd));
    for bi in 0..batch {
        im2col(&xs[bi * c * h * wd..(bi + 1) * c * h * wd], c, h, wd, k, cols.as_slice_mut().expect("owned"));
        let mut yb = y
            .index_axis_mut(Axis(0), bi)
            .into_shape_with_order((o, h * wd))
            .expect("conv output layout");
        for (mut row, &bias) in yb.rows_mut().into_iter().zip(b.iter()) {
            row.fill(bias);
        }
        general_mat_mul(1.0, &wmat, &cols, 1.0, &mut yb);
    }
    y
}

/// Accumulates weight and bias gradients; the input gradient is the "same"
/// correlation of `dy` with the flipped, channel-swapped kernel.
pub(crate) fn conv_backward(
    x: &Array4<f64>,
    w: ArrayView4<f64>,
    dy: &Array4<f64>,
    dw: ndarray::ArrayViewMut4<f64>,
    mut db: ArrayViewMut1<f64>,
    need_input_grad: bool,
) -> Option<Array4<f64>> {
    let (batch, c, h, wd) = x.dim();
    let (o, _, k, _) = w.dim();
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut dwmat = dw
        .into_shape_with_order((o, c * k * k))
        .expect("conv grad layout");
    let mut cols = Array2::zeros((c * k * k, h * wd));
    for bi in 0..batch {
        im2col(&xs[bi * c * h * wd..(bi + 1) * c * h * wd], c, h, wd, k, cols.as_slice_mut().expect("owned"));
        let dyb = dy
            .index_axis(Axis(0), bi)
            .into_shape_with_order((o, h * wd))
            .expect("conv grad layout");
        general_mat_mul(1.0, &dyb, &cols.t(), 1.0, &mut dwmat);
        db += &dyb.sum_axis(Axis(1));
    }
    need_input_grad.then(|| conv_forward(dy, transpose_kernel(w).view(), Array1::zeros(c).view()))
}

/// Kernel of the stride-1 transposed convolution `[in, out, k, k]`, rewritten as an
/// equivalent cross-correlation kernel `[out, in, k, k]` (spatially flipped).
pub(crate) fn transpose_kernel(w: ArrayView4<f64>) -> Array4<f64> {
    let (i, o, k, _) = w.dim();
    Array4::from_shape_fn((o, i, k, k), |(oo, ii, a, b)| w[[ii, oo, k - 1 - a, k - 1 - b]])
}

/// Maps a gradient w.r.t. the flipped kernel back onto the stored `[in, out, k, k]` layout.
pub(crate) fn untranspose_grad(g: &Array4<f64>, mut dw: ndarray::ArrayViewMut4<f64>) {
    let (o, i, k, _) = g.dim();
    for oo in 0..o {
        for ii in 0..i {
            for a in 0..k {
                for b in 0..k {
                    dw[[ii, oo, k - 1 - a, k - 1 - b]] += g[[oo, ii, a, b]];
                }
            }
        }
    }
}

pub(crate) fn avg_pool2(x: &Array4<f64>) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    Array4::from_shape_fn((b, c, h / 2, w / 2), |(bi, ci, y, xx)| {
        0.25 * (x[[bi, ci, 2 * y, 2 * xx]]
            + x[[bi, ci, 2 * y + 1, 2 * xx]]
            + x[[bi, ci, 2 * y, 2 * xx + 1]]
            + x[[bi, ci, 2 * y + 1, 2 * xx + 1]])
    })
}

pub(crate) fn avg_pool2_backward(dy: &Array4<f64>) -> Array4<f64> {
    let (b, c, h, w) = dy.dim();
    Array4::from_shape_fn((b, c, 2 * h, 2 * w), |(bi, ci, y, x)| 0.25 * dy[[bi, ci, y / 2, x / 2]])
}

pub(crate) fn upsample2(x: &Array4<f64>) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    Array4::from_shape_fn((b, c, 2 * h, 2 * w), |(bi, ci, y, xx)| x[[bi, ci, y / 2, xx / 2]])
}

pub(crate) fn upsample2_backward(dy: &Array4<f64>) -> Array4<f64> {
    let (b, c, h, w) = dy.dim();
    Array4::from_shape_fn((b, c, h / 2, w / 2), |(bi, ci, y, x)| {
        dy[[bi, ci, 2 * y, 2 * x]]
            + dy[[bi, ci, 2 * y + 1, 2 * x]]
            + dy[[bi, ci, 2 * y, 2 * x + 1]]
            + dy[[bi, ci, 2 * y + 1, 2 * x + 1]]
    })
}

pub(crate) fn concat_channels(a: &Array4<f64>, b: &Array4<f64>) -> Array4<f64> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("matching spatial dims")
}

/// Inverted-dropout mask for one sample: zero with probability `p`, else `1/(1−p)`.
pub(crate) fn dropout_mask(len: usize, p: f64, mask_seed: u64) -> Vec<f64> {
    if p == 0.0 {
        return vec![1.0; len];
    }
    let keep = 1.0 / (1.0 - p);
    let mut rng = seed::rng(mask_seed);
    (0..len)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect()
}

pub(crate) fn all_finite<'a>(mut values: impl Iterator<Item = &'a f64>) -> bool {
    values.all(|v| v.is_finite())
}
