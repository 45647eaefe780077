//! Unnormalized forward 2D DFT and its `1/n²`-normalized inverse.

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use super::{Image, KSpace};

/// Result of [`idft2`]: the real part plus the largest discarded imaginary magnitude.
#[derive(Debug, Clone)]
pub struct InverseDft {
    pub image: Image,
    pub imag_residual: f64,
}

fn transform_rows_cols(n: usize, data: &mut [Complex64], fft: &Arc<dyn Fft<f64>>) {
    let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
    for row in data.chunks_exact_mut(n) {
        fft.process_with_scratch(row, &mut scratch);
    }
    let mut col = vec![Complex64::default(); n];
    for c in 0..n {
        for r in 0..n {
            col[r] = data[r * n + c];
        }
        fft.process_with_scratch(&mut col, &mut scratch);
        for r in 0..n {
            data[r * n + c] = col[r];
        }
    }
}

pub fn dft2(img: &Image) -> KSpace {
    let n = img.n();
    let mut data: Vec<Complex64> = img.pixels().iter().map(|&p| Complex64::new(p, 0.0)).collect();
    let fft = FftPlanner::new().plan_fft_forward(n);
    transform_rows_cols(n, &mut data, &fft);
    KSpace {
        n,
        re: data.iter().map(|c| c.re).collect(),
        im: data.iter().map(|c| c.im).collect(),
    }
}

pub fn idft2(k: &KSpace) -> InverseDft {
    let n = k.n;
    let mut data: Vec<Complex64> = k
        .re
        .iter()
        .zip(&k.im)
        .map(|(&re, &im)| Complex64::new(re, im))
        .collect();
    let fft = FftPlanner::new().plan_fft_inverse(n);
    transform_rows_cols(n, &mut data, &fft);
    let scale = 1.0 / (n * n) as f64;
    let mut imag_residual = 0.0f64;
    let pixels = data
        .iter()
        .map(|c| {
            imag_residual = imag_residual.max((c.im * scale).abs());
            c.re * scale
        })
        .collect();
    InverseDft {
        image: Image::from_vec(n, pixels).expect("inverse of finite k-space"),
        imag_residual,
    }
}
