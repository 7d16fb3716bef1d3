//! Training loop: AdamW under a one-cycle schedule, per-episode
//! forward/backward with batch-averaged gradients, and best-checkpoint
//! selection on validation AP.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::LabelSet;
use crate::metrics::average_precision;
use crate::optim::{adamw_step, AdamWConfig, AdamWState, OneCycleSchedule};
use crate::scalar::{sc, Scalar};
use crate::{rng_from_seed, SeedRng};

use super::forward::{episode_forward, predict, ForwardOptions};
use super::{EpisodeFeatures, ModelConfig, ModelParams};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Episodes per optimizer step; gradients are averaged over the batch.
    pub batch_size: usize,
    pub seed: u64,
    /// Peak of the one-cycle schedule.
    pub max_lr: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 65,
            batch_size: 4,
            seed: 0,
            max_lr: 1e-3,
            weight_decay: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_video_ap: Option<f64>,
    pub val_dialog_ap: Option<f64>,
    pub last_lr: f64,
}

pub struct TrainOutput<T> {
    /// Parameters of the best epoch (validation AP, or train loss when no
    /// validation set is given).
    pub params: ModelParams<T>,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
}

/// Binarized labels for AP computation.
fn binarize(labels: &[f64], threshold: f64) -> Vec<bool> {
    labels.iter().map(|&y| y >= threshold).collect()
}

/// Macro-averaged AP of predictions over a set; `None` when no episode has
/// a computable AP (e.g. no positives).
fn macro_ap<T: Scalar>(
    set: &[(EpisodeFeatures<T>, LabelSet)],
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<(Option<f64>, Option<f64>)> {
    let mut video = Vec::new();
    let mut dialog = Vec::new();
    for (episode, labels) in set {
        let scores = predict(episode, params, cfg)?;
        if let Ok(ap) = average_precision(
            &scores.shot_scores,
            &binarize(&labels.shot_scores, labels.binarize_threshold),
        ) {
            video.push(ap);
        }
        if !scores.dialog_scores.is_empty() {
            if let Ok(ap) = average_precision(
                &scores.dialog_scores,
                &binarize(&labels.dialog_scores, labels.binarize_threshold),
            ) {
                dialog.push(ap);
            }
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    Ok((mean(&video), mean(&dialog)))
}

/// Train from scratch on `(episode, labels)` pairs.
pub fn train<T: Scalar>(
    train_set: &[(EpisodeFeatures<T>, LabelSet)],
    val_set: &[(EpisodeFeatures<T>, LabelSet)],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<TrainOutput<T>> {
    if train_set.is_empty() {
        return Err(Error::invalid("training needs at least one episode"));
    }
    if train_cfg.batch_size == 0 || train_cfg.max_epochs == 0 {
        return Err(Error::invalid("batch_size and max_epochs must be positive"));
    }
    model_cfg.validate()?;

    let mut rng: SeedRng = rng_from_seed(train_cfg.seed);
    let mut params = ModelParams::<T>::init(model_cfg, &mut rng)?;

    let steps_per_epoch = train_set.len().div_ceil(train_cfg.batch_size);
    let total_steps = steps_per_epoch * train_cfg.max_epochs;
    let schedule = OneCycleSchedule::new(train_cfg.max_lr, total_steps)?;
    let adamw_cfg = AdamWConfig {
        weight_decay: train_cfg.weight_decay,
        ..Default::default()
    };
    let mut opt_state = AdamWState::new();

    let mut history = Vec::with_capacity(train_cfg.max_epochs);
    let mut best_params = params.clone();
    let mut best_epoch = 0usize;
    let mut best_val = f64::NEG_INFINITY;
    let mut best_loss = f64::INFINITY;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let opts = ForwardOptions {
        train: true,
        ..Default::default()
    };

    for epoch in 0..train_cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut last_lr = 0.0;

        for chunk in order.chunks(train_cfg.batch_size) {
            params.zero_grads();
            for &idx in chunk {
                let (episode, labels) = &train_set[idx];
                let mut pass =
                    episode_forward(episode, &params, model_cfg, &opts, Some(labels), &mut rng)?;
                let loss_value = pass.loss_value.expect("loss requested");
                if !loss_value.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "training loss for episode {} at epoch {epoch}, step {step} \
                         (loss = {loss_value})",
                        episode.id
                    )));
                }
                epoch_loss += loss_value;
                let loss_node = pass.loss.expect("loss node");
                pass.graph.backward(loss_node)?;
                pass.graph.accumulate_param_grads(params.params_mut())?;
            }
            params.scale_grads(sc::<T>(1.0 / chunk.len() as f64));
            last_lr = schedule.lr(step)?;
            adamw_step(params.params_mut(), &mut opt_state, last_lr, &adamw_cfg)?;
            step += 1;
        }
        epoch_loss /= train_set.len() as f64;

        let (val_video_ap, val_dialog_ap) = if val_set.is_empty() {
            (None, None)
        } else {
            macro_ap(val_set, &params, model_cfg)?
        };
        history.push(EpochStats {
            epoch,
            train_loss: epoch_loss,
            val_video_ap,
            val_dialog_ap,
            last_lr,
        });

        // Model selection: combined validation AP when available, otherwise
        // lowest train loss.
        let val_metric = match (val_video_ap, val_dialog_ap) {
            (Some(v), Some(d)) => Some((v + d) / 2.0),
            (Some(v), None) => Some(v),
            (None, Some(d)) => Some(d),
            (None, None) => None,
        };
        let improved = match val_metric {
            Some(m) => m > best_val,
            None => epoch_loss < best_loss,
        };
        if improved {
            if let Some(m) = val_metric {
                best_val = m;
            }
            best_loss = best_loss.min(epoch_loss);
            best_params = params.clone();
            best_epoch = epoch;
        }
    }

    Ok(TrainOutput {
        params: best_params,
        history,
        best_epoch,
    })
}
