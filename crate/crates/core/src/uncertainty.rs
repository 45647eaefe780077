//! Perturbation-based uncertainty scores: local Lipschitz ratios, k-draw
//! output variance, MC-dropout and ensemble protocols.

use crate::models::{ArchKind, Mode, ReconModel};
use crate::numerics::{apply_noise, std_dev, Image, NoiseSpec};
use crate::parallel::prelude::*;
use crate::{seed, Error, Result};

/// Noise level used when none is configured.
pub const DEFAULT_NOISE_FRACTION: f64 = 0.05;
pub const DEFAULT_VARIANCE_DRAWS: usize = 4;
pub const DEFAULT_MC_ITERATIONS: usize = 50;
pub const DEFAULT_ENSEMBLE_SIZE: usize = 5;

/// Anything that maps a sensor vector to a flattened `n × n` image.
pub trait Reconstructor: Sync {
    fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>>;

    fn reconstruct_batch(&self, xs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        xs.par_iter().map(|x| self.reconstruct(x)).collect::<Vec<_>>().into_iter().collect()
    }
}

impl Reconstructor for ReconModel {
    fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x, Mode::Deterministic)?.into_vec())
    }

    fn reconstruct_batch(&self, xs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        self.forward_batch(xs, &vec![Mode::Deterministic; xs.len()])
    }
}

/// Adapts a plain function into a [`Reconstructor`].
pub struct FnModel<F>(pub F);

impl<F> Reconstructor for FnModel<F>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok((self.0)(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzScore {
    pub value: f64,
    /// `None` for the pairwise form, where both inputs carry their own noise.
    pub noise_fraction: Option<f64>,
    /// L1 norm of the input difference.
    pub input_norm: f64,
    /// L1 norm of the output difference.
    pub output_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceScore {
    pub value: f64,
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapMethod {
    LipschitzDiff,
    McVariance,
    EnsembleVariance,
}

impl MapMethod {
    pub fn name(self) -> &'static str {
        match self {
            MapMethod::LipschitzDiff => "lipschitz-diff",
            MapMethod::McVariance => "mc-variance",
            MapMethod::EnsembleVariance => "ensemble-variance",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    pub pixels: Image,
    pub method: MapMethod,
}

/// Scores produced by the MC-dropout and ensemble protocols.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolScores {
    pub lipschitz: LipschitzScore,
    pub variance: VarianceScore,
    pub mean_clean: Vec<f64>,
    pub mean_noisy: Vec<f64>,
    pub variance_map: UncertaintyMap,
}

fn side(len: usize) -> Result<usize> {
    let n = (len as f64).sqrt().round() as usize;
    if n * n != len {
        return Err(Error::Shape(format!("output of length {len} is not square")));
    }
    Ok(n)
}

fn l1_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn check_fraction(noise_fraction: f64) -> Result<()> {
    if !(noise_fraction > 0.0 && noise_fraction.is_finite()) {
        return Err(Error::Invalid(format!("noise fraction must be positive, got {noise_fraction}")));
    }
    Ok(())
}

/// `x` plus Gaussian noise at `noise_fraction` of `std(x)`.
pub fn perturb(x: &[f64], noise_fraction: f64, seed: u64) -> Result<Vec<f64>> {
    check_fraction(noise_fraction)?;
    let s = std_dev(x);
    if x.iter().all(|&v| v == x[0]) || s == 0.0 || !s.is_finite() {
        return Err(Error::DegenerateInput);
    }
    Ok(apply_noise(x, &NoiseSpec::gaussian(noise_fraction, seed), s))
}

/// Dimension-normalized L1 ratio between an input pair and its output pair.
pub fn lipschitz_ratio(x: &[f64], x2: &[f64], y: &[f64], y2: &[f64]) -> Result<LipschitzScore> {
    if x.len() != x2.len() || y.len() != y2.len() {
        return Err(Error::Shape("lipschitz ratio needs matching pairs".into()));
    }
    let input_norm = l1_diff(x, x2);
    if input_norm == 0.0 {
        return Err(Error::ZeroPerturbation);
    }
    let output_norm = l1_diff(y, y2);
    Ok(LipschitzScore {
        value: (output_norm / y.len() as f64) / (input_norm / x.len() as f64),
        noise_fraction: None,
        input_norm,
        output_norm,
    })
}

fn diff_map(y: &[f64], y2: &[f64]) -> Result<UncertaintyMap> {
    let pixels = Image::from_vec(side(y.len())?, y.iter().zip(y2).map(|(a, b)| (a - b).abs()).collect())?;
    Ok(UncertaintyMap {
        pixels,
        method: MapMethod::LipschitzDiff,
    })
}

/// Per-pixel unbiased variance across `outputs` (Welford updates).
pub fn pixel_variance(outputs: &[Vec<f64>]) -> Vec<f64> {
    let k = outputs.len();
    assert!(k >= 2, "variance needs at least two outputs");
    let mut mean = vec![0.0; outputs[0].len()];
    let mut m2 = vec![0.0; mean.len()];
    for (i, o) in outputs.iter().enumerate() {
        for ((m, s), x) in mean.iter_mut().zip(m2.iter_mut()).zip(o) {
            let d = x - *m;
            *m += d / (i + 1) as f64;
            *s += d * (x - *m);
        }
    }
    m2.iter_mut().for_each(|v| *v /= (k - 1) as f64);
    m2
}

/// Elementwise mean of equally long outputs.
pub fn mean_output(outputs: &[Vec<f64>]) -> Vec<f64> {
    let mut mean = vec![0.0; outputs[0].len()];
    for o in outputs {
        mean.iter_mut().zip(o).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= outputs.len() as f64);
    mean
}

fn variance_parts(outputs: &[Vec<f64>], method: MapMethod) -> Result<(VarianceScore, UncertaintyMap)> {
    let var = pixel_variance(outputs);
    let value = var.iter().sum::<f64>() / var.len() as f64;
    let pixels = Image::from_vec(side(var.len())?, var)?;
    Ok((
        VarianceScore { value, k: outputs.len() },
        UncertaintyMap { pixels, method },
    ))
}

/// Lipschitz ratio between `x` and one Gaussian perturbation of it, plus the
/// per-pixel absolute output difference.
pub fn local_lipschitz<M: Reconstructor + ?Sized>(
    model: &M,
    x: &[f64],
    noise_fraction: f64,
    seed: u64,
) -> Result<(LipschitzScore, UncertaintyMap)> {
    let x2 = perturb(x, noise_fraction, seed)?;
    let mut ys = model.reconstruct_batch(&[x, &x2])?;
    let y2 = ys.pop().expect("two outputs");
    let y = ys.pop().expect("two outputs");
    let mut score = lipschitz_ratio(x, &x2, &y, &y2)?;
    score.noise_fraction = Some(noise_fraction);
    Ok((score, diff_map(&y, &y2)?))
}

/// [`local_lipschitz`] over many inputs in one batched pass; input `i` uses
/// noise seed `base_seed + i`.
pub fn local_lipschitz_batch<M: Reconstructor + ?Sized>(
    model: &M,
    xs: &[&[f64]],
    noise_fraction: f64,
    base_seed: u64,
) -> Result<Vec<(LipschitzScore, UncertaintyMap)>> {
    let noisy: Vec<Vec<f64>> = xs
        .par_iter()
        .enumerate()
        .map(|(i, x)| perturb(x, noise_fraction, base_seed.wrapping_add(i as u64)))
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<_>>()?;
    let mut all: Vec<&[f64]> = xs.to_vec();
    all.extend(noisy.iter().map(|v| v.as_slice()));
    let ys = model.reconstruct_batch(&all)?;
    let (clean, pert) = ys.split_at(xs.len());
    (0..xs.len())
        .map(|i| {
            let mut score = lipschitz_ratio(xs[i], &noisy[i], &clean[i], &pert[i])?;
            score.noise_fraction = Some(noise_fraction);
            Ok((score, diff_map(&clean[i], &pert[i])?))
        })
        .collect()
}

/// Variance across `k` perturbed reconstructions, draw `i` seeded `base_seed + i`.
pub fn perturbation_variance<M: Reconstructor + ?Sized>(
    model: &M,
    x: &[f64],
    noise_fraction: f64,
    k: usize,
    base_seed: u64,
) -> Result<(VarianceScore, UncertaintyMap)> {
    Ok(perturbation_variance_batch(model, &[x], noise_fraction, k, base_seed)?.pop().expect("one input"))
}

/// [`perturbation_variance`] for many inputs; input `i` uses base seed
/// `seed::derive(base_seed, i)`.
pub fn perturbation_variance_batch<M: Reconstructor + ?Sized>(
    model: &M,
    xs: &[&[f64]],
    noise_fraction: f64,
    k: usize,
    base_seed: u64,
) -> Result<Vec<(VarianceScore, UncertaintyMap)>> {
    if k < 2 {
        return Err(Error::Invalid(format!("variance needs k >= 2, got {k}")));
    }
    let single = xs.len() == 1;
    let noisy: Vec<Vec<f64>> = (0..xs.len() * k)
        .into_par_iter()
        .map(|j| {
            let (i, d) = (j / k, j % k);
            let base = if single { base_seed } else { seed::derive(base_seed, i as u64) };
            perturb(xs[i], noise_fraction, base.wrapping_add(d as u64))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<_>>()?;
    let refs: Vec<&[f64]> = noisy.iter().map(|v| v.as_slice()).collect();
    let ys = model.reconstruct_batch(&refs)?;
    ys.chunks(k).map(|outs| variance_parts(outs, MapMethod::McVariance)).collect()
}

/// Repeated dropout forwards of the clean input and of one fixed perturbed
/// input. Lipschitz uses the two mean outputs; variance uses the clean runs.
///
/// Pass `i` of both inputs shares the dropout mask seeded by
/// `seed::derive(base_seed, i)`; the noise draw uses `base_seed` directly.
pub fn mc_dropout_scores(
    model: &ReconModel,
    x: &[f64],
    noise_fraction: f64,
    iterations: usize,
    base_seed: u64,
) -> Result<ProtocolScores> {
    if model.spec().kind != ArchKind::AutomapDropout {
        return Err(Error::Invalid(format!(
            "MC dropout needs an automap-dropout model, got {}",
            model.spec().kind.name()
        )));
    }
    if iterations < 2 {
        return Err(Error::Invalid(format!("MC dropout needs at least 2 iterations, got {iterations}")));
    }
    let x2 = perturb(x, noise_fraction, base_seed)?;
    let seeds: Vec<u64> = (0..iterations as u64).map(|i| seed::derive(base_seed, i)).collect();
    let clean = model.forward_repeated(x, &seeds)?;
    let noisy = model.forward_repeated(&x2, &seeds)?;
    finish_protocol(x, &x2, noise_fraction, &clean, &noisy, MapMethod::McVariance)
}

/// Ensemble-mean Lipschitz and member variance; all members see the same
/// noise draw seeded by `seed`.
pub fn ensemble_scores(models: &[ReconModel], x: &[f64], noise_fraction: f64, seed: u64) -> Result<ProtocolScores> {
    check_ensemble(models)?;
    let x2 = perturb(x, noise_fraction, seed)?;
    let mut clean = Vec::with_capacity(models.len());
    let mut noisy = Vec::with_capacity(models.len());
    for m in models {
        let mut ys = m.reconstruct_batch(&[x, &x2])?;
        noisy.push(ys.pop().expect("two outputs"));
        clean.push(ys.pop().expect("two outputs"));
    }
    finish_protocol(x, &x2, noise_fraction, &clean, &noisy, MapMethod::EnsembleVariance)
}

/// [`ensemble_scores`] for many inputs with each member run once over the
/// whole batch; input `i` uses noise seed `base_seed + i`.
pub fn ensemble_scores_batch(
    models: &[ReconModel],
    xs: &[&[f64]],
    noise_fraction: f64,
    base_seed: u64,
) -> Result<Vec<ProtocolScores>> {
    check_ensemble(models)?;
    let noisy: Vec<Vec<f64>> = xs
        .par_iter()
        .enumerate()
        .map(|(i, x)| perturb(x, noise_fraction, base_seed.wrapping_add(i as u64)))
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<_>>()?;
    let mut all: Vec<&[f64]> = xs.to_vec();
    all.extend(noisy.iter().map(|v| v.as_slice()));
    let outs = models
        .iter()
        .map(|m| m.reconstruct_batch(&all))
        .collect::<Result<Vec<_>>>()?;
    (0..xs.len())
        .map(|i| {
            let clean: Vec<Vec<f64>> = outs.iter().map(|o| o[i].clone()).collect();
            let pert: Vec<Vec<f64>> = outs.iter().map(|o| o[xs.len() + i].clone()).collect();
            finish_protocol(xs[i], &noisy[i], noise_fraction, &clean, &pert, MapMethod::EnsembleVariance)
        })
        .collect()
}

fn check_ensemble(models: &[ReconModel]) -> Result<()> {
    if models.len() < 2 {
        return Err(Error::Invalid(format!("ensemble needs at least 2 models, got {}", models.len())));
    }
    let spec = models[0].spec();
    if let Some(m) = models.iter().find(|m| m.spec() != spec) {
        return Err(Error::ModelMismatch(format!(
            "ensemble members differ: {:?} vs {:?}",
            spec.kind,
            m.spec().kind
        )));
    }
    Ok(())
}

fn finish_protocol(
    x: &[f64],
    x2: &[f64],
    noise_fraction: f64,
    clean: &[Vec<f64>],
    noisy: &[Vec<f64>],
    method: MapMethod,
) -> Result<ProtocolScores> {
    let mean_clean = mean_output(clean);
    let mean_noisy = mean_output(noisy);
    let mut lipschitz = lipschitz_ratio(x, x2, &mean_clean, &mean_noisy)?;
    lipschitz.noise_fraction = Some(noise_fraction);
    let (variance, variance_map) = variance_parts(clean, method)?;
    Ok(ProtocolScores {
        lipschitz,
        variance,
        mean_clean,
        mean_noisy,
        variance_map,
    })
}

/// Lipschitz ratio between reconstructions of two independently noisy inputs.
pub fn lipschitz_pairwise<M: Reconstructor + ?Sized>(model: &M, x_lo: &[f64], x_hi: &[f64]) -> Result<LipschitzScore> {
    if x_lo.len() != x_hi.len() {
        return Err(Error::Shape(format!("inputs of length {} and {}", x_lo.len(), x_hi.len())));
    }
    if x_lo == x_hi {
        return Err(Error::ZeroPerturbation);
    }
    let ys = model.reconstruct_batch(&[x_lo, x_hi])?;
    lipschitz_ratio(x_lo, x_hi, &ys[0], &ys[1])
}

/// [`lipschitz_pairwise`] over aligned input lists, batched.
pub fn lipschitz_pairwise_batch<M: Reconstructor + ?Sized>(
    model: &M,
    lo: &[&[f64]],
    hi: &[&[f64]],
) -> Result<Vec<LipschitzScore>> {
    if lo.len() != hi.len() {
        return Err(Error::Shape(format!("{} low-noise inputs but {} high-noise", lo.len(), hi.len())));
    }
    let mut all = lo.to_vec();
    all.extend_from_slice(hi);
    let ys = model.reconstruct_batch(&all)?;
    let (a, b) = ys.split_at(lo.len());
    (0..lo.len())
        .map(|i| {
            if lo[i] == hi[i] {
                return Err(Error::ZeroPerturbation);
            }
            lipschitz_ratio(lo[i], hi[i], &a[i], &b[i])
        })
        .collect()
}
