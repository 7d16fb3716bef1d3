//! Two-level episode importance model.
//!
//! Level 1 turns each shot's per-backbone frame features into one vector
//! (gated fusion, then a small transformer read out at a CLS token) and each
//! utterance's token features into one vector (projected mean pool). Level 2
//! interleaves all vectors in time, cuts them into local story groups,
//! appends a learnable group token per block, and runs a transformer encoder
//! whose attention mask is block-diagonal plus a clique over group tokens.
//! A shared linear head scores every shot and dialog token.

mod forward;
mod params;
mod partition;
mod train;

pub use forward::{
    compute_loss, episode_forward, positive_weight, predict, sample_frames, weighted_bce,
    ForwardOptions, ForwardPass, SampleMode,
};
pub use params::ModelParams;
pub use partition::{attention_mask, GroupPartition, SeqSlot};
pub use train::{train, EpochStats, TrainConfig, TrainOutput};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Hyperparameters of the model and its input feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Shared model width D.
    pub dim: usize,
    /// Attention heads in both transformer levels.
    pub heads: usize,
    /// Layers in the shot-level transformer.
    pub shot_layers: usize,
    /// Layers in the episode-level transformer.
    pub episode_layers: usize,
    /// Tokens per local story group.
    pub group_size: usize,
    /// Width of a time-embedding bin, in seconds.
    pub time_bin_s: f64,
    /// Frames sampled per shot.
    pub frame_cap: usize,
    /// Dropout after the feature projections.
    pub proj_dropout: f64,
    /// Dropout on attention weights.
    pub attn_dropout: f64,
    /// Dropout before the classifier head.
    pub head_dropout: f64,
    /// Per-backbone frame feature dims.
    pub video_dims: [usize; 3],
    /// Dialog token feature dim.
    pub dialog_dim: usize,
    /// Capacity of the group-embedding table.
    pub max_groups: usize,
    /// Longest supported episode, sizes the time-embedding table.
    pub max_duration_s: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 128,
            heads: 8,
            shot_layers: 1,
            episode_layers: 6,
            group_size: 20,
            time_bin_s: 1.0,
            frame_cap: 25,
            proj_dropout: 0.1,
            attn_dropout: 0.2,
            head_dropout: 0.2,
            video_dims: [1664, 768, 512],
            dialog_dim: 1024,
            max_groups: 256,
            max_duration_s: 3600.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if !self.dim.is_multiple_of(2) {
            return Err(Error::invalid("dim must be even for sinusoidal tables"));
        }
        if self.group_size < 2 {
            return Err(Error::invalid("group_size must be at least 2"));
        }
        if self.time_bin_s <= 0.0 || self.max_duration_s <= 0.0 {
            return Err(Error::invalid("time bin and max duration must be positive"));
        }
        if self.frame_cap == 0 {
            return Err(Error::invalid("frame_cap must be positive"));
        }
        if self.shot_layers == 0 || self.episode_layers == 0 {
            return Err(Error::invalid("both transformers need at least one layer"));
        }
        for d in [self.proj_dropout, self.attn_dropout, self.head_dropout] {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::invalid(format!("dropout {d} must be in [0, 1)")));
            }
        }
        if self.video_dims.contains(&0) || self.dialog_dim == 0 {
            return Err(Error::invalid("feature dims must be positive"));
        }
        if self.max_groups == 0 {
            return Err(Error::invalid("max_groups must be positive"));
        }
        Ok(())
    }

    /// Rows of the time-embedding table.
    pub fn time_bins(&self) -> usize {
        (self.max_duration_s / self.time_bin_s).ceil() as usize
    }
}

/// Precomputed features of one shot: one frame matrix per backbone plus the
/// shot's time span.
#[derive(Debug, Clone)]
pub struct ShotFeatures<T> {
    pub features: [Tensor<T>; 3],
    pub span: (f64, f64),
}

impl<T: Scalar> ShotFeatures<T> {
    pub fn num_frames(&self) -> usize {
        self.features[0].rows()
    }

    pub fn mid_time(&self) -> f64 {
        0.5 * (self.span.0 + self.span.1)
    }
}

/// Precomputed token features of one dialog utterance plus its span.
#[derive(Debug, Clone)]
pub struct UtteranceFeatures<T> {
    pub tokens: Tensor<T>,
    pub span: (f64, f64),
}

impl<T: Scalar> UtteranceFeatures<T> {
    pub fn mid_time(&self) -> f64 {
        0.5 * (self.span.0 + self.span.1)
    }
}

/// Everything the model sees of one episode.
#[derive(Debug, Clone)]
pub struct EpisodeFeatures<T> {
    pub id: String,
    pub shots: Vec<ShotFeatures<T>>,
    pub utterances: Vec<UtteranceFeatures<T>>,
    pub duration_s: f64,
}

impl<T: Scalar> EpisodeFeatures<T> {
    pub fn num_shots(&self) -> usize {
        self.shots.len()
    }

    pub fn num_utterances(&self) -> usize {
        self.utterances.len()
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.shots.is_empty() {
            return Err(Error::Manifest(format!("episode {} has no shots", self.id)));
        }
        let check_spans = |spans: &mut dyn Iterator<Item = (f64, f64)>, what: &str| -> Result<()> {
            let mut prev_end = f64::NEG_INFINITY;
            for (i, (s, e)) in spans.enumerate() {
                if !(s.is_finite() && e.is_finite()) || s < 0.0 || e < s {
                    return Err(Error::Manifest(format!(
                        "episode {}: {what} {i} has invalid span [{s}, {e})",
                        self.id
                    )));
                }
                if s < prev_end {
                    return Err(Error::Manifest(format!(
                        "episode {}: {what} {i} overlaps or precedes {what} {}",
                        self.id,
                        i.saturating_sub(1)
                    )));
                }
                prev_end = e;
                if e > self.duration_s {
                    return Err(Error::Manifest(format!(
                        "episode {}: {what} {i} ends at {e}s beyond duration {}s",
                        self.id, self.duration_s
                    )));
                }
            }
            Ok(())
        };
        check_spans(&mut self.shots.iter().map(|s| s.span), "shot")?;
        check_spans(&mut self.utterances.iter().map(|u| u.span), "utterance")?;

        for (i, s) in self.shots.iter().enumerate() {
            let frames = s.features[0].rows();
            if frames == 0 {
                return Err(Error::Manifest(format!(
                    "episode {}: shot {i} has no frames",
                    self.id
                )));
            }
            for (k, f) in s.features.iter().enumerate() {
                if f.cols() != cfg.video_dims[k] {
                    return Err(Error::shape(
                        format!("episode {}: shot {i} backbone {k}", self.id),
                        format!("dim {}", cfg.video_dims[k]),
                        format!("{}", f.cols()),
                    ));
                }
                if f.rows() != frames {
                    return Err(Error::shape(
                        format!("episode {}: shot {i} backbone {k}", self.id),
                        format!("{frames} frames"),
                        format!("{}", f.rows()),
                    ));
                }
            }
        }
        for (l, u) in self.utterances.iter().enumerate() {
            if u.tokens.rows() == 0 {
                return Err(Error::Manifest(format!(
                    "episode {}: utterance {l} has no tokens",
                    self.id
                )));
            }
            if u.tokens.cols() != cfg.dialog_dim {
                return Err(Error::shape(
                    format!("episode {}: utterance {l}", self.id),
                    format!("dim {}", cfg.dialog_dim),
                    format!("{}", u.tokens.cols()),
                ));
            }
        }
        Ok(())
    }
}

/// Predicted importance scores, strictly inside (0, 1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeScores {
    pub shot_scores: Vec<f64>,
    pub dialog_scores: Vec<f64>,
}

impl EpisodeScores {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: &[f64]| v.iter().all(|&s| s > 0.0 && s < 1.0);
        if !ok(&self.shot_scores) || !ok(&self.dialog_scores) {
            return Err(Error::invalid("scores must lie strictly in (0, 1)"));
        }
        Ok(())
    }
}
