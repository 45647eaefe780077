//! Uncentered RMSProp with optional heavy-ball momentum.

use super::{ReconModel, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RmsPropState {
    /// Running mean of squared gradients, one buffer per parameter tensor.
    pub mean_square: Vec<Vec<f64>>,
    /// Only allocated when momentum > 0.
    pub velocity: Option<Vec<Vec<f64>>>,
}

impl RmsPropState {
    pub fn for_model(model: &ReconModel, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|t| vec![0.0; t.data.len()]).collect();
        Self {
            velocity: (cfg.momentum > 0.0).then(|| zeros.clone()),
            mean_square: zeros,
        }
    }

    pub fn apply(&mut self, model: &mut ReconModel, grads: &[Vec<f64>], cfg: &TrainConfig) {
        for (i, t) in model.params_mut().iter_mut().enumerate() {
            let vel = self.velocity.as_mut().map(|v| v[i].as_mut_slice());
            rmsprop_step(&mut t.data, &grads[i], &mut self.mean_square[i], vel, cfg);
        }
    }
}

/// `v ← ρv + (1−ρ)g²`, `w ← w − lr·g/√(v+ε)`; with momentum `μ > 0` the step
/// is accumulated into a velocity `m ← μm + lr·g/√(v+ε)` and `w ← w − m`.
pub fn rmsprop_step(
    weights: &mut [f64],
    grads: &[f64],
    mean_square: &mut [f64],
    velocity: Option<&mut [f64]>,
    cfg: &TrainConfig,
) {
    assert_eq!(weights.len(), grads.len(), "weight/grad length");
    assert_eq!(weights.len(), mean_square.len(), "weight/state length");
    let decay = cfg.rms_decay;
    match velocity {
        Some(vel) if cfg.momentum > 0.0 => {
            for (((w, g), v), m) in weights.iter_mut().zip(grads).zip(mean_square.iter_mut()).zip(vel.iter_mut()) {
                *v = decay * *v + (1.0 - decay) * g * g;
                *m = cfg.momentum * *m + cfg.learning_rate * g / (*v + cfg.epsilon).sqrt();
                *w -= *m;
            }
        }
        _ => {
            for ((w, g), v) in weights.iter_mut().zip(grads).zip(mean_square.iter_mut()) {
                *v = decay * *v + (1.0 - decay) * g * g;
                *w -= cfg.learning_rate * g / (*v + cfg.epsilon).sqrt();
            }
        }
    }
}
