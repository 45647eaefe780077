use rand::seq::SliceRandom;

use super::{ArchKind, RmsPropState, ReconModel, TrainConfig};
use crate::{seed, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean over minibatches of the batch total loss.
    pub mean_total_loss: f64,
    pub mean_data_loss: f64,
}

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const DROPOUT_STREAM: u64 = 0x4452_4f50;

pub fn train(model: ReconModel, dataset: &[(&[f64], &[f64])], cfg: &TrainConfig) -> Result<(ReconModel, Vec<EpochStats>)> {
    train_with(model, dataset, cfg, |_| {})
}

/// Minibatch RMSProp. Epoch `e` shuffles with a seed derived from `(cfg.seed, e)`;
/// `on_epoch` sees each epoch's statistics as they are produced.
pub fn train_with(
    mut model: ReconModel,
    dataset: &[(&[f64], &[f64])],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(ReconModel, Vec<EpochStats>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let mut state = RmsPropState::for_model(&model, cfg);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let stochastic = model.spec().kind == ArchKind::AutomapDropout;

    for epoch in 0..cfg.epochs {
        let epoch_seed = seed::derive(cfg.seed, epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut seed::rng(seed::derive(epoch_seed, SHUFFLE_STREAM)));
        let (mut total, mut data, mut batches) = (0.0, 0.0, 0usize);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(&[f64], &[f64])> = idx.iter().map(|&i| dataset[i]).collect();
            let dropout_seed = stochastic.then(|| seed::derive(seed::derive(epoch_seed, DROPOUT_STREAM), b as u64));
            let (report, grads) = model.loss_and_grad(&batch, cfg, dropout_seed).map_err(|e| match e {
                Error::NonFinite { layer } => Error::NonFinite {
                    layer: format!("{layer} (epoch {epoch}, batch {b})"),
                },
                other => other,
            })?;
            state.apply(&mut model, &grads, cfg);
            total += report.total;
            data += report.data_loss;
            batches += 1;
        }
        let stats = EpochStats {
            epoch,
            mean_total_loss: total / batches as f64,
            mean_data_loss: data / batches as f64,
        };
        on_epoch(&stats);
        history.push(stats);
    }
    Ok((model, history))
}
