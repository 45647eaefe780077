//! Parallel-beam Radon projection over `[0°, 180°)` and ramp-filtered backprojection.
//!
//! Geometry: pixel `(r, c)` sits at `x = c − (n−1)/2`, `y = (n−1)/2 − r`. Detector
//! bin `k` measures the line `x·cosθ + y·sinθ = k − (d−1)/2`, with `d` from
//! [`detector_count`]. Rays are sampled every half pixel through a bilinear
//! interpolant of the image.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use super::Image;
use crate::{Error, Result};

const RAY_STEP: f64 = 0.5;

/// `ceil(n·√2)`, bumped to the next odd number so a centre bin exists.
pub fn detector_count(n: usize) -> usize {
    let d = (n as f64 * std::f64::consts::SQRT_2).ceil() as usize;
    if d % 2 == 0 {
        d + 1
    } else {
        d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    /// Row-major `views × detectors` line integrals.
    pub data: Vec<f64>,
    pub angles_deg: Vec<f64>,
    pub detectors: usize,
    /// Side of the image this sinogram was projected from.
    pub n: usize,
}

impl Sinogram {
    pub fn views(&self) -> usize {
        self.angles_deg.len()
    }

    pub fn view(&self, i: usize) -> &[f64] {
        &self.data[i * self.detectors..(i + 1) * self.detectors]
    }

    /// Keeps every `factor`-th view starting at view 0.
    pub fn subsample(&self, factor: usize) -> Result<Sinogram> {
        if factor == 0 || self.views() % factor != 0 {
            return Err(Error::Invalid(format!(
                "subsampling factor {factor} does not divide {} views",
                self.views()
            )));
        }
        let mut data = Vec::with_capacity(self.data.len() / factor);
        let mut angles_deg = Vec::with_capacity(self.views() / factor);
        for v in (0..self.views()).step_by(factor) {
            data.extend_from_slice(self.view(v));
            angles_deg.push(self.angles_deg[v]);
        }
        Ok(Sinogram {
            data,
            angles_deg,
            detectors: self.detectors,
            n: self.n,
        })
    }
}

pub(crate) fn uniform_angles(views: usize) -> Vec<f64> {
    (0..views).map(|i| 180.0 * i as f64 / views as f64).collect()
}

/// Sparse system matrix (CSR) mapping pixels to ray sums.
struct Projector {
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    weights: Vec<f64>,
}

impl Projector {
    fn build(n: usize, views: usize) -> Self {
        let d = detector_count(n);
        let half = (n as f64 - 1.0) / 2.0;
        let t0 = (d as f64 - 1.0) / 2.0;
        let reach = d as f64 / 2.0;
        let samples = (2.0 * reach / RAY_STEP).round() as usize;

        let mut row_ptr = Vec::with_capacity(views * d + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        let mut scratch = vec![0.0; n * n];
        let mut touched: Vec<usize> = Vec::new();
        row_ptr.push(0);

        for theta in uniform_angles(views).into_iter().map(f64::to_radians) {
            let (sin, cos) = theta.sin_cos();
            for k in 0..d {
                let t = k as f64 - t0;
                for j in 0..samples {
                    let s = -reach + (j as f64 + 0.5) * RAY_STEP;
                    let x = t * cos - s * sin;
                    let y = t * sin + s * cos;
                    let col = x + half;
                    let row = half - y;
                    let (c0, r0) = (col.floor(), row.floor());
                    let (fc, fr) = (col - c0, row - r0);
                    for (dr, wr) in [(0, 1.0 - fr), (1, fr)] {
                        for (dc, wc) in [(0, 1.0 - fc), (1, fc)] {
                            let (rr, cc) = (r0 as i64 + dr, c0 as i64 + dc);
                            let w = wr * wc * RAY_STEP;
                            if w == 0.0 || rr < 0 || cc < 0 || rr >= n as i64 || cc >= n as i64 {
                                continue;
                            }
                            let idx = rr as usize * n + cc as usize;
                            if scratch[idx] == 0.0 {
                                touched.push(idx);
                            }
                            scratch[idx] += w;
                        }
                    }
                }
                touched.sort_unstable();
                for &idx in &touched {
                    cols.push(idx as u32);
                    weights.push(scratch[idx]);
                    scratch[idx] = 0.0;
                }
                touched.clear();
                row_ptr.push(cols.len());
            }
        }
        Self {
            row_ptr,
            cols,
            weights,
        }
    }

    fn apply(&self, pixels: &[f64]) -> Vec<f64> {
        self.row_ptr
            .windows(2)
            .map(|w| {
                (w[0]..w[1])
                    .map(|i| self.weights[i] * pixels[self.cols[i] as usize])
                    .sum()
            })
            .collect()
    }
}

fn projector(n: usize, views: usize) -> Arc<Projector> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<Projector>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(p) = cache.lock().expect("projector cache").get(&(n, views)) {
        return Arc::clone(p);
    }
    let built = Arc::new(Projector::build(n, views));
    let mut guard = cache.lock().expect("projector cache");
    Arc::clone(guard.entry((n, views)).or_insert(built))
}

pub fn radon(img: &Image, views: usize) -> Result<Sinogram> {
    if views == 0 {
        return Err(Error::Invalid("radon needs at least one view".into()));
    }
    let n = img.n();
    Ok(Sinogram {
        data: projector(n, views).apply(img.pixels()),
        angles_deg: uniform_angles(views),
        detectors: detector_count(n),
        n,
    })
}

/// Spectrum of the band-limited ramp kernel sampled at unit detector spacing.
fn ramp_spectrum(padded: usize) -> Vec<f64> {
    let mut kernel = vec![Complex64::default(); padded];
    kernel[0].re = 0.25;
    for k in 1..padded / 2 {
        if k % 2 == 1 {
            let v = -1.0 / (PI * PI * (k * k) as f64);
            kernel[k].re = v;
            kernel[padded - k].re = v;
        }
    }
    FftPlanner::new()
        .plan_fft_forward(padded)
        .process(&mut kernel);
    kernel.iter().map(|c| c.re).collect()
}

/// Ramp-filters each view, then smears it back across an `n × n` grid.
pub fn iradon_fbp(sin: &Sinogram) -> Image {
    let n = sin.n;
    let d = sin.detectors;
    let padded = (2 * d).next_power_of_two();
    let ramp = ramp_spectrum(padded);
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(padded);
    let inv = planner.plan_fft_inverse(padded);

    let half = (n as f64 - 1.0) / 2.0;
    let t0 = (d as f64 - 1.0) / 2.0;
    let mut out = vec![0.0; n * n];
    let mut buf = vec![Complex64::default(); padded];
    let mut filtered = vec![0.0; d];

    for (v, &deg) in sin.angles_deg.iter().enumerate() {
        buf.iter_mut().for_each(|c| *c = Complex64::default());
        for (b, &p) in buf.iter_mut().zip(sin.view(v)) {
            b.re = p;
        }
        fwd.process(&mut buf);
        for (b, &h) in buf.iter_mut().zip(&ramp) {
            *b *= h;
        }
        inv.process(&mut buf);
        for (f, b) in filtered.iter_mut().zip(&buf) {
            *f = b.re / padded as f64;
        }

        let (sin_t, cos_t) = deg.to_radians().sin_cos();
        for r in 0..n {
            let y = half - r as f64;
            for c in 0..n {
                let x = c as f64 - half;
                let u = x * cos_t + y * sin_t + t0;
                let u0 = u.floor();
                let i0 = u0 as i64;
                let frac = u - u0;
                let at = |i: i64| {
                    if i >= 0 && (i as usize) < d {
                        filtered[i as usize]
                    } else {
                        0.0
                    }
                };
                out[r * n + c] += (1.0 - frac) * at(i0) + frac * at(i0 + 1);
            }
        }
    }
    let scale = PI / sin.views().max(1) as f64;
    out.iter_mut().for_each(|p| *p *= scale);
    Image::from_vec(n, out).expect("backprojection of finite sinogram")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    fn disk(n: usize, radius: f64) -> Image {
        let half = (n as f64 - 1.0) / 2.0;
        Image::from_fn(n, |r, c| {
            let (x, y) = (c as f64 - half, half - r as f64);
            if x * x + y * y <= radius * radius {
                1.0
            } else {
                0.0
            }
        })
        .unwrap()
    }

    fn shepp_like(n: usize) -> Image {
        let half = (n as f64 - 1.0) / 2.0;
        let s = n as f64 / 2.0;
        let ellipses = [
            (0.0, 0.0, 0.69, 0.92, 0.0, 1.0),
            (0.0, -0.0184, 0.6624, 0.874, 0.0, -0.8),
            (0.22, 0.0, 0.11, 0.31, -18.0, -0.2),
            (-0.22, 0.0, 0.16, 0.41, 18.0, -0.2),
            (0.0, 0.35, 0.21, 0.25, 0.0, 0.1),
            (0.0, 0.1, 0.046, 0.046, 0.0, 0.1),
        ];
        Image::from_fn(n, |r, c| {
            let (x, y) = ((c as f64 - half) / s, (half - r as f64) / s);
            ellipses
                .iter()
                .filter(|(cx, cy, a, b, phi, _)| {
                    let (sp, cp) = (phi as &f64).to_radians().sin_cos();
                    let (dx, dy) = (x - cx, y - cy);
                    let u = dx * cp + dy * sp;
                    let v = -dx * sp + dy * cp;
                    (u / a).powi(2) + (v / b).powi(2) <= 1.0
                })
                .map(|e| e.5)
                .sum()
        })
        .unwrap()
    }

    /// Bilinear line integral with a 16× finer step than the projector.
    fn dense_ray_oracle(img: &Image, views: usize) -> Vec<f64> {
        let n = img.n();
        let d = detector_count(n);
        let half = (n as f64 - 1.0) / 2.0;
        let t0 = (d as f64 - 1.0) / 2.0;
        let step = RAY_STEP / 16.0;
        let reach = d as f64 / 2.0;
        let samples = (2.0 * reach / step).round() as usize;
        let px = |r: i64, c: i64| {
            if r < 0 || c < 0 || r >= n as i64 || c >= n as i64 {
                0.0
            } else {
                img.get(r as usize, c as usize)
            }
        };
        let mut out = Vec::new();
        for v in 0..views {
            let theta = (180.0 * v as f64 / views as f64).to_radians();
            for k in 0..d {
                let t = k as f64 - t0;
                let mut acc = 0.0;
                for j in 0..samples {
                    let s = -reach + (j as f64 + 0.5) * step;
                    let col = t * theta.cos() - s * theta.sin() + half;
                    let row = half - (t * theta.sin() + s * theta.cos());
                    let (c0, r0) = (col.floor(), row.floor());
                    let (fc, fr) = (col - c0, row - r0);
                    let (c0, r0) = (c0 as i64, r0 as i64);
                    acc += (1.0 - fr) * ((1.0 - fc) * px(r0, c0) + fc * px(r0, c0 + 1))
                        + fr * ((1.0 - fc) * px(r0 + 1, c0) + fc * px(r0 + 1, c0 + 1));
                }
                out.push(acc * step);
            }
        }
        out
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    fn mae(a: &Image, b: &Image) -> f64 {
        a.pixels()
            .iter()
            .zip(b.pixels())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / a.pixels().len() as f64
    }

    #[test]
    fn detector_count_is_odd_and_covers_diagonal() {
        assert_eq!(detector_count(32), 47);
        assert_eq!(detector_count(8), 13);
        for n in [4, 8, 16, 32, 64] {
            let d = detector_count(n);
            assert_eq!(d % 2, 1);
            assert!(d as f64 >= n as f64 * 2f64.sqrt());
        }
    }

    #[test]
    fn zero_image_zero_sinogram() {
        let s = radon(&Image::zeros(16), 30).unwrap();
        assert_eq!(s.views(), 30);
        assert!(s.data.iter().all(|&v| v == 0.0));
        assert!(iradon_fbp(&s).pixels().iter().all(|&p| p == 0.0));
        assert!(radon(&Image::zeros(16), 0).is_err());
    }

    #[test]
    fn disk_mass_preserved_per_view() {
        let img = disk(32, 9.0);
        let mass: f64 = img.pixels().iter().sum();
        let s = radon(&img, 90).unwrap();
        for v in 0..s.views() {
            let sum: f64 = s.view(v).iter().sum();
            assert!((sum / mass - 1.0).abs() < 0.01, "view {v}: {sum} vs {mass}");
        }
    }

    #[test]
    fn matches_dense_ray_oracle() {
        let img = shepp_like(32);
        let fast = radon(&img, 90).unwrap();
        let dense = dense_ray_oracle(&img, 90);
        let scale = dense.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let worst = fast
            .data
            .iter()
            .zip(&dense)
            .map(|(a, b)| (a - b).abs() / scale)
            .fold(0.0, f64::max);
        assert!(worst < 0.02, "max relative deviation {worst}");
    }

    #[test]
    fn radon_is_linear() {
        let mut rng = seed::rng(5);
        let a = Image::from_fn(16, |_, _| rng.random::<f64>()).unwrap();
        let b = Image::from_fn(16, |_, _| rng.random::<f64>()).unwrap();
        let combo = Image::from_fn(16, |r, c| 2.5 * a.get(r, c) - 0.75 * b.get(r, c)).unwrap();
        let (ra, rb, rc) = (
            radon(&a, 45).unwrap(),
            radon(&b, 45).unwrap(),
            radon(&combo, 45).unwrap(),
        );
        for i in 0..rc.data.len() {
            assert!((rc.data[i] - (2.5 * ra.data[i] - 0.75 * rb.data[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn fbp_recovers_disk() {
        let img = disk(32, 10.0);
        let rec = iradon_fbp(&radon(&img, 360).unwrap());
        let rho = pearson(rec.pixels(), img.pixels());
        assert!(rho > 0.95, "correlation {rho}");
    }

    #[test]
    fn fewer_views_reconstruct_worse() {
        let img = disk(32, 10.0);
        let full = radon(&img, 360).unwrap();
        let sparse = full.subsample(4).unwrap();
        assert_eq!(sparse.views(), 90);
        let e_full = mae(&iradon_fbp(&full), &img);
        let e_sparse = mae(&iradon_fbp(&sparse), &img);
        assert!(e_sparse > e_full, "{e_sparse} vs {e_full}");
    }

    #[test]
    fn subsample_rejects_non_divisor() {
        let s = radon(&Image::zeros(8), 10).unwrap();
        assert!(s.subsample(3).is_err());
        assert!(s.subsample(0).is_err());
    }
}
