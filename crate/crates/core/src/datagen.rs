//! Synthetic phantoms and the task-specific input/target pair builders.
//!
//! Two phantom families stand in for the in-distribution and shifted data:
//! `id-ellipse` (soft ellipses inside a skull-like shell, dark border) and
//! `ood-block` (bright rectangles over striped texture filling the frame).

use rand::Rng;
use std::f64::consts::{PI, TAU};

use crate::numerics::{apply_noise, dft2, idft2, iradon_fbp, radon, std_dev, Image, KSpace, NoiseSpec};
use crate::parallel::prelude::*;
use crate::{seed, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    IdEllipse,
    OodBlock,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::IdEllipse => "id-ellipse",
            Family::OodBlock => "ood-block",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "id-ellipse" | "id" => Some(Family::IdEllipse),
            "ood-block" | "ood" => Some(Family::OodBlock),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub image: Image,
    pub family: Family,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// k-space (real ‖ imaginary) to image.
    Automap,
    /// Noisy inverse-DFT image to clean image.
    Denoise,
    /// Sparse-view FBP image to full-view FBP image.
    Ct,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Automap => "automap",
            Task::Denoise => "denoise",
            Task::Ct => "ct",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "automap" => Some(Task::Automap),
            "denoise" => Some(Task::Denoise),
            "ct" => Some(Task::Ct),
            _ => None,
        }
    }

    pub fn code(self) -> u32 {
        match self {
            Task::Automap => 0,
            Task::Denoise => 1,
            Task::Ct => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        [Task::Automap, Task::Denoise, Task::Ct].into_iter().find(|t| t.code() == code)
    }

    /// Noise fraction used for training pairs.
    pub fn default_noise(self) -> f64 {
        match self {
            Task::Automap => 0.01,
            Task::Denoise | Task::Ct => 0.10,
        }
    }

    pub fn encoding(self) -> Encoding {
        match self {
            Task::Automap => Encoding::KspaceConcat,
            Task::Denoise => Encoding::ImageNoisy,
            Task::Ct => Encoding::ImageSparseCt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    KspaceConcat,
    ImageNoisy,
    ImageSparseCt,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorInput {
    pub values: Vec<f64>,
    pub encoding: Encoding,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleMeta {
    pub phantom_seed: u64,
    pub noise_seed: u64,
    /// Present when the source image was augmented.
    pub augment_seed: Option<u64>,
    pub task: Task,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub input: SensorInput,
    /// Noise-free reconstruction target.
    pub target: Image,
    /// Ground-truth image the pair was built from (after augmentation).
    pub source: Image,
    pub meta: SampleMeta,
}

/// Sparse-view CT acquisition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CtProtocol {
    pub full_views: usize,
    pub factor: usize,
    pub noise_frac: f64,
}

impl Default for CtProtocol {
    fn default() -> Self {
        Self {
            full_views: 360,
            factor: 4,
            noise_frac: 0.10,
        }
    }
}

const NOISE_STREAM: u64 = 0x4e4f_4953;
const AUGMENT_STREAM: u64 = 0x4155_474d;
const SHAPE_STREAM: u64 = 0x5348_4150;

/// Seed offset separating the held-out splits from training seeds.
pub const TEST_SEED_OFFSET: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    IdTest,
    OodTest,
}

impl Split {
    /// Base phantom seed for the split; train uses `base` directly, the test
    /// splits start at least [`TEST_SEED_OFFSET`] away.
    pub fn base_seed(self, base: u64) -> u64 {
        match self {
            Split::Train => base,
            Split::IdTest => base.wrapping_add(TEST_SEED_OFFSET),
            Split::OodTest => base.wrapping_add(2 * TEST_SEED_OFFSET),
        }
    }
}

struct Frame {
    half: f64,
    scale: f64,
}

impl Frame {
    fn new(n: usize) -> Self {
        Self {
            half: (n as f64 - 1.0) / 2.0,
            scale: n as f64 / 2.0,
        }
    }

    /// Normalized coordinates in roughly `[-1, 1]²`, y up.
    fn coords(&self, r: usize, c: usize) -> (f64, f64) {
        ((c as f64 - self.half) / self.scale, (self.half - r as f64) / self.scale)
    }
}

fn rotated(u: f64, v: f64, cx: f64, cy: f64, phi: f64) -> (f64, f64) {
    let (s, c) = phi.sin_cos();
    let (dx, dy) = (u - cx, v - cy);
    (dx * c + dy * s, -dx * s + dy * c)
}

fn id_ellipse(n: usize, rng: &mut impl Rng) -> Image {
    let frame = Frame::new(n);
    // keep the shell clear of the outermost two pixels
    let reach = (1.0 - 2.5 / frame.scale).min(0.82);
    let skull_a = reach * rng.random_range(0.86..0.97);
    let skull_b = reach * rng.random_range(0.92..1.0);
    let skull_phi = rng.random_range(-0.15..0.15);
    let shell = rng.random_range(0.80..0.88);
    let skull_level = rng.random_range(0.85..0.95);
    let brain_level = rng.random_range(0.12..0.25);

    struct Blob {
        cx: f64,
        cy: f64,
        a: f64,
        b: f64,
        phi: f64,
        level: f64,
        dir: (f64, f64),
        slope: f64,
    }
    let count = rng.random_range(5..=9);
    let blobs: Vec<Blob> = (0..count)
        .map(|_| {
            let rad = rng.random_range(0.0..0.55);
            let ang = rng.random_range(0.0..TAU);
            let theta = rng.random_range(0.0..TAU);
            Blob {
                cx: rad * skull_a * ang.cos(),
                cy: rad * skull_b * ang.sin(),
                a: rng.random_range(0.08..0.32),
                b: rng.random_range(0.08..0.32),
                phi: rng.random_range(0.0..PI),
                level: rng.random_range(-0.10..0.40),
                dir: (theta.cos(), theta.sin()),
                slope: rng.random_range(-0.6..0.6),
            }
        })
        .collect();

    Image::from_fn(n, |r, c| {
        let (u, v) = frame.coords(r, c);
        let (su, sv) = rotated(u, v, 0.0, 0.0, skull_phi);
        let rho = (su / skull_a).powi(2) + (sv / skull_b).powi(2);
        if rho > 1.0 {
            return 0.0;
        }
        if rho > shell * shell {
            return skull_level;
        }
        let mut val = brain_level;
        for blob in &blobs {
            let (eu, ev) = rotated(u, v, blob.cx, blob.cy, blob.phi);
            if (eu / blob.a).powi(2) + (ev / blob.b).powi(2) <= 1.0 {
                let along = (u - blob.cx) * blob.dir.0 + (v - blob.cy) * blob.dir.1;
                val += blob.level * (1.0 + blob.slope * along / blob.a.max(blob.b));
            }
        }
        val.clamp(0.0, 1.0)
    })
    .expect("finite phantom")
}

fn ood_block(n: usize, rng: &mut impl Rng) -> Image {
    let frame = Frame::new(n);
    let theta = rng.random_range(0.0..PI);
    let freq = rng.random_range(2.0..5.0);
    let phase = rng.random_range(0.0..TAU);
    let base = rng.random_range(0.25..0.40);
    let amp = rng.random_range(0.08..0.15);
    let count = rng.random_range(3..=6);
    let rects: Vec<(f64, f64, f64, f64, f64)> = (0..count)
        .map(|_| {
            let w = rng.random_range(0.5..1.3);
            let h = rng.random_range(0.5..1.3);
            let x0 = rng.random_range(-1.0..(1.0 - w * 0.5));
            let y0 = rng.random_range(-1.0..(1.0 - h * 0.5));
            (x0, y0, x0 + w, y0 + h, rng.random_range(0.65..0.95))
        })
        .collect();
    Image::from_fn(n, |r, c| {
        let (u, v) = frame.coords(r, c);
        let stripe = (TAU * freq * 0.5 * (u * theta.cos() + v * theta.sin()) + phase).sin();
        let mut val = base + amp * stripe;
        for &(x0, y0, x1, y1, level) in &rects {
            if u >= x0 && u <= x1 && v >= y0 && v <= y1 {
                val = val.max(level + 0.5 * amp * stripe);
            }
        }
        val.clamp(0.0, 1.0)
    })
    .expect("finite phantom")
}

pub fn make_phantom(family: Family, n: usize, phantom_seed: u64) -> Result<Phantom> {
    if !Image::valid_side(n) {
        return Err(Error::Invalid(format!("phantom side {n} must be a power of two >= 4")));
    }
    let mut rng = seed::rng(seed::derive(phantom_seed, SHAPE_STREAM));
    let image = match family {
        Family::IdEllipse => id_ellipse(n, &mut rng),
        Family::OodBlock => ood_block(n, &mut rng),
    };
    Ok(Phantom {
        image,
        family,
        seed: phantom_seed,
    })
}

/// `n × n` window at `(row, col)` of the `2n × 2n` four-reflection tiling
/// (original, horizontal flip / vertical flip, both flips).
pub fn augment_at(img: &Image, row: usize, col: usize) -> Image {
    let n = img.n();
    assert!(row <= n && col <= n, "crop offset outside tiling");
    Image::from_fn(n, |r, c| {
        let (tr, tc) = (r + row, c + col);
        let sr = if tr < n { tr } else { 2 * n - 1 - tr };
        let sc = if tc < n { tc } else { 2 * n - 1 - tc };
        img.get(sr, sc)
    })
    .expect("crop of finite image")
}

/// Uniformly random crop of the reflection tiling.
pub fn augment(img: &Image, augment_seed: u64) -> Image {
    let mut rng = seed::rng(augment_seed);
    let n = img.n();
    let row = rng.random_range(0..=n);
    let col = rng.random_range(0..=n);
    augment_at(img, row, col)
}

/// Builds the task input for `source` at noise level `noise_frac`.
pub fn encode_input(task: Task, source: &Image, noise_frac: f64, noise_seed: u64, ct: &CtProtocol) -> Result<SensorInput> {
    let n = source.n();
    let values = match task {
        Task::Automap => {
            let k = dft2(source).to_concat();
            apply_noise(&k, &NoiseSpec::multiplicative(noise_frac, noise_seed), 0.0)
        }
        Task::Denoise => {
            let k = dft2(source).to_concat();
            let noisy = apply_noise(&k, &NoiseSpec::gaussian(noise_frac, noise_seed), std_dev(&k));
            idft2(&KSpace::from_concat(n, &noisy)?).image.into_vec()
        }
        Task::Ct => {
            let full = radon(source, ct.full_views)?;
            let mut noisy = full.clone();
            noisy.data = apply_noise(&full.data, &NoiseSpec::gaussian(noise_frac, noise_seed), std_dev(&full.data));
            iradon_fbp(&noisy.subsample(ct.factor)?).into_vec()
        }
    };
    Ok(SensorInput {
        values,
        encoding: task.encoding(),
        n,
    })
}

fn target_for(task: Task, source: &Image, ct: &CtProtocol) -> Result<Image> {
    match task {
        Task::Automap | Task::Denoise => Ok(source.clone()),
        Task::Ct => Ok(iradon_fbp(&radon(source, ct.full_views)?)),
    }
}

fn pair(task: Task, ph: &Phantom, noise_frac: f64, noise_seed: u64, ct: &CtProtocol) -> Result<SamplePair> {
    Ok(SamplePair {
        input: encode_input(task, &ph.image, noise_frac, noise_seed, ct)?,
        target: target_for(task, &ph.image, ct)?,
        source: ph.image.clone(),
        meta: SampleMeta {
            phantom_seed: ph.seed,
            noise_seed,
            augment_seed: None,
            task,
        },
    })
}

/// k-space input (real ‖ imaginary) with multiplicative noise; target is the phantom.
pub fn encode_automap_pair(ph: &Phantom, noise: &NoiseSpec) -> SamplePair {
    pair(Task::Automap, ph, noise.fraction, noise.seed, &CtProtocol::default()).expect("k-space encoding is total")
}

/// Gaussian noise at `noise_frac` of the k-space std, then inverse DFT.
pub fn make_denoise_pair(ph: &Phantom, noise_frac: f64, noise_seed: u64) -> SamplePair {
    pair(Task::Denoise, ph, noise_frac, noise_seed, &CtProtocol::default()).expect("denoise encoding is total")
}

/// Noise on the full sinogram, keep every `factor`-th view, FBP. Target is the
/// full-view noise-free FBP.
pub fn make_ct_pair(ph: &Phantom, protocol: &CtProtocol, noise_seed: u64) -> Result<SamplePair> {
    pair(Task::Ct, ph, protocol.noise_frac, noise_seed, protocol)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetSpec {
    pub task: Task,
    pub family: Family,
    pub count: usize,
    pub n: usize,
    /// Seed of sample 0; sample `i` uses phantom seed `base_seed + i`.
    pub base_seed: u64,
    pub augment: bool,
    pub noise_fraction: f64,
    pub ct: CtProtocol,
}

impl DatasetSpec {
    pub fn new(task: Task, family: Family, count: usize, n: usize, base_seed: u64) -> Self {
        Self {
            task,
            family,
            count,
            n,
            base_seed,
            augment: false,
            noise_fraction: task.default_noise(),
            ct: CtProtocol::default(),
        }
    }
}

pub fn build_sample(spec: &DatasetSpec, index: usize) -> Result<SamplePair> {
    let phantom_seed = spec.base_seed.wrapping_add(index as u64);
    let mut ph = make_phantom(spec.family, spec.n, phantom_seed)?;
    let augment_seed = spec.augment.then(|| seed::derive(phantom_seed, AUGMENT_STREAM));
    if let Some(s) = augment_seed {
        ph.image = augment(&ph.image, s);
    }
    let noise_seed = seed::derive(phantom_seed, NOISE_STREAM);
    let mut p = pair(spec.task, &ph, spec.noise_fraction, noise_seed, &spec.ct)?;
    p.meta.augment_seed = augment_seed;
    Ok(p)
}

/// Generates every sample of `spec`; output is independent of generation order.
pub fn build_dataset(spec: &DatasetSpec) -> Result<Vec<SamplePair>> {
    if spec.count == 0 {
        return Err(Error::Invalid("dataset count must be at least 1".into()));
    }
    if spec.task == Task::Ct && (spec.ct.factor == 0 || spec.ct.full_views % spec.ct.factor != 0) {
        return Err(Error::Invalid(format!(
            "factor {} does not divide {} views",
            spec.ct.factor, spec.ct.full_views
        )));
    }
    (0..spec.count)
        .into_par_iter()
        .map(|i| build_sample(spec, i))
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}
