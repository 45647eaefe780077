use rand_distr::{Distribution, StandardNormal};

use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    /// `out = x + fraction·reference_std·g`
    GaussianAdditive,
    /// `out = x·(1 + fraction·g)`, reference std ignored.
    Multiplicative,
}

/// Noise level as a fraction of a reference scale, plus the seed that fixes the draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub fraction: f64,
    pub kind: NoiseKind,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn gaussian(fraction: f64, seed: u64) -> Self {
        debug_assert!((0.0..=1.0).contains(&fraction));
        Self {
            fraction,
            kind: NoiseKind::GaussianAdditive,
            seed,
        }
    }

    pub fn multiplicative(fraction: f64, seed: u64) -> Self {
        debug_assert!((0.0..=1.0).contains(&fraction));
        Self {
            fraction,
            kind: NoiseKind::Multiplicative,
            seed,
        }
    }
}

/// Draws the standard-normal vector used by [`apply_noise`] for `seed`.
pub(crate) fn standard_normals(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = seed::rng(seed);
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}

pub fn apply_noise(data: &[f64], spec: &NoiseSpec, reference_std: f64) -> Vec<f64> {
    if spec.fraction == 0.0 {
        return data.to_vec();
    }
    let g = standard_normals(data.len(), spec.seed);
    match spec.kind {
        NoiseKind::GaussianAdditive => {
            let sigma = spec.fraction * reference_std;
            data.iter().zip(g).map(|(x, g)| x + sigma * g).collect()
        }
        NoiseKind::Multiplicative => data
            .iter()
            .zip(g)
            .map(|(x, g)| x * (1.0 + spec.fraction * g))
            .collect(),
    }
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}
