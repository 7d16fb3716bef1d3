//! Forward pass: frame sampling, shot/utterance encoding, token assembly,
//! the masked episode transformer, scoring, and the weighted BCE loss.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{Graph, Mask, NodeId};
use crate::labeling::LabelSet;
use crate::scalar::{sc, Scalar};
use crate::tensor::Tensor;
use crate::SeedRng;

use super::partition::{attention_mask, GroupPartition, SeqSlot};
use super::{
    EpisodeFeatures, EpisodeScores, ModelConfig, ModelParams, ShotFeatures, UtteranceFeatures,
};

/// Probabilities entering the loss are clamped into this open interval.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Uniform random subset without replacement (data augmentation).
    Train,
    /// Deterministic evenly spaced subset including the first frame.
    Infer,
}

/// Pick up to `cap` frame indices out of `num_frames`, sorted ascending.
pub fn sample_frames(
    num_frames: usize,
    mode: SampleMode,
    cap: usize,
    rng: &mut SeedRng,
) -> Vec<usize> {
    debug_assert!(num_frames >= 1 && cap >= 1);
    if num_frames <= cap {
        return (0..num_frames).collect();
    }
    match mode {
        SampleMode::Train => {
            let mut picked = rand::seq::index::sample(rng, num_frames, cap).into_vec();
            picked.sort_unstable();
            picked
        }
        SampleMode::Infer => {
            if cap == 1 {
                return vec![0];
            }
            let step = (num_frames - 1) as f64 / (cap - 1) as f64;
            (0..cap)
                .map(|j| (j as f64 * step).round() as usize)
                .collect()
        }
    }
}

/// Knobs for a single forward pass. `pad_tokens` appends mask-isolated
/// padding slots; `group_clique` can drop the group-token clique from the
/// attention mask (used by isolation tests).
#[derive(Debug, Clone)]
pub struct ForwardOptions {
    pub train: bool,
    pub pad_tokens: usize,
    pub group_clique: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            train: false,
            pad_tokens: 0,
            group_clique: true,
        }
    }
}

/// A completed forward pass with its live graph, so callers can run
/// `backward` on the loss or inspect intermediate nodes.
pub struct ForwardPass<T> {
    pub graph: Graph<T>,
    pub partition: GroupPartition,
    pub scores: EpisodeScores,
    pub shot_probs: NodeId,
    pub dialog_probs: Option<NodeId>,
    pub loss: Option<NodeId>,
    pub loss_value: Option<f64>,
}

/// Blend the three projected backbone views of each frame with
/// softmax(tanh(..)) gate weights. Inputs are `T' x D_k` matrices of the
/// selected frames; output is `T' x D`.
pub fn fuse_frames<T: Scalar>(
    g: &mut Graph<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    selected: [Tensor<T>; 3],
    train: bool,
    rng: &mut SeedRng,
) -> Result<NodeId> {
    let mut projected = Vec::with_capacity(3);
    for (k, feat) in selected.into_iter().enumerate() {
        if feat.cols() != cfg.video_dims[k] {
            return Err(Error::shape(
                format!("fuse_frames backbone {k}"),
                format!("dim {}", cfg.video_dims[k]),
                format!("{}", feat.cols()),
            ));
        }
        let x = g.constant(feat);
        let p = params.backbone_proj[k].forward(g, x)?;
        let p = g.dropout(p, cfg.proj_dropout, train, rng)?;
        projected.push(p);
    }
    let concat = g.concat_cols(&projected)?;
    let gate_logits = params.fusion.forward(g, concat)?;
    let gate = g.tanh(gate_logits);
    let alphas = g.softmax_rows(gate);
    let mut fused: Option<NodeId> = None;
    for (k, &p) in projected.iter().enumerate() {
        let a = g.slice_cols(alphas, k, 1)?;
        let term = g.mul_col(p, a)?;
        fused = Some(match fused {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    Ok(fused.unwrap())
}

/// Encode one shot: fuse sampled frames, add frame-position encodings,
/// prepend the CLS vector, run the shot transformer, read the CLS output.
#[allow(clippy::too_many_arguments)]
pub fn encode_shot<T: Scalar>(
    g: &mut Graph<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    shot: &ShotFeatures<T>,
    frame_indices: &[usize],
    masks: &mut MaskCache,
    train: bool,
    rng: &mut SeedRng,
) -> Result<NodeId> {
    if frame_indices.is_empty() {
        return Err(Error::invalid("encode_shot: no frames selected"));
    }
    let take = |t: &Tensor<T>| -> Result<Tensor<T>> {
        let rows: Vec<Vec<T>> = frame_indices.iter().map(|&i| t.row(i).to_vec()).collect();
        Tensor::from_rows(&rows)
    };
    let selected = [
        take(&shot.features[0])?,
        take(&shot.features[1])?,
        take(&shot.features[2])?,
    ];
    let fused = fuse_frames(g, params, cfg, selected, train, rng)?;

    let t = frame_indices.len();
    let pos_rows: Vec<Vec<T>> = (0..t).map(|j| params.frame_pos.row(j).to_vec()).collect();
    let pos = g.constant(Tensor::from_rows(&pos_rows)?);
    let with_pos = g.add(fused, pos)?;

    let cls = g.param(&params.shot_cls);
    let mut x = g.concat_rows(&[cls, with_pos])?;
    let mask = masks.full(t + 1);
    for layer in &params.shot_encoder {
        x = layer.forward(g, x, &mask, train, cfg.attn_dropout, rng)?;
    }
    g.slice_rows(x, 0, 1)
}

/// Encode one utterance: project tokens, then mean-pool.
pub fn encode_utterance<T: Scalar>(
    g: &mut Graph<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    utterance: &UtteranceFeatures<T>,
    train: bool,
    rng: &mut SeedRng,
) -> Result<NodeId> {
    if utterance.tokens.rows() == 0 {
        return Err(Error::invalid("encode_utterance: no tokens"));
    }
    let x = g.constant(utterance.tokens.clone());
    let p = params.utter_proj.forward(g, x)?;
    let p = g.dropout(p, cfg.proj_dropout, train, rng)?;
    Ok(g.mean_rows(p))
}

/// Small cache of full-attention masks keyed by size.
#[derive(Default)]
pub struct MaskCache(HashMap<usize, Arc<Mask>>);

impl MaskCache {
    pub fn full(&mut self, n: usize) -> Arc<Mask> {
        Arc::clone(self.0.entry(n).or_insert_with(|| Arc::new(Mask::full(n))))
    }
}

/// Lay out encoded shots, utterances, and group tokens in partition order,
/// add type/time/group embeddings, and layer-normalize the result.
/// `pad_tokens` extra all-zero rows are appended after the real sequence.
pub fn assemble_tokens<T: Scalar>(
    g: &mut Graph<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    partition: &GroupPartition,
    shot_vecs: &[NodeId],
    utter_vecs: &[NodeId],
    pad_tokens: usize,
) -> Result<NodeId> {
    let d = cfg.dim;
    let n = shot_vecs.len();
    let m = utter_vecs.len();
    if partition.num_groups() > cfg.max_groups {
        return Err(Error::invalid(format!(
            "episode needs {} story groups but the group table holds {} (raise max_groups)",
            partition.num_groups(),
            cfg.max_groups
        )));
    }

    // Base rows: all shot vectors, all utterance vectors, the shared group
    // token, and one zero row for padding.
    let q = g.param(&params.group_token);
    let zero_row = g.constant(Tensor::zeros(&[1, d]));
    let mut sources: Vec<NodeId> = Vec::with_capacity(n + m + 2);
    sources.extend_from_slice(shot_vecs);
    sources.extend_from_slice(utter_vecs);
    sources.push(q);
    sources.push(zero_row);
    let stacked = g.concat_rows(&sources)?;
    let q_row = n + m;
    let pad_row = n + m + 1;

    let time_bins = params.time_table.value.rows();
    let mut base_idx = Vec::with_capacity(partition.seq_len() + pad_tokens);
    let mut type_idx = Vec::with_capacity(base_idx.capacity());
    let mut time_idx = Vec::with_capacity(base_idx.capacity());
    let mut group_idx = Vec::with_capacity(base_idx.capacity());
    let bin_of = |mid: f64, what: String| -> Result<usize> {
        let bin = (mid / cfg.time_bin_s).floor() as usize;
        if bin >= time_bins {
            return Err(Error::invalid(format!(
                "{what} at {mid:.2}s needs time bin {bin} but the table has {time_bins} \
                 (raise max_duration_s)"
            )));
        }
        Ok(bin)
    };
    for slot in partition.slots() {
        match *slot {
            SeqSlot::Shot {
                index,
                mid_time_s,
                group,
            } => {
                base_idx.push(index);
                type_idx.push(0);
                time_idx.push(bin_of(mid_time_s, format!("shot {index}"))?);
                group_idx.push(group);
            }
            SeqSlot::Dialog {
                index,
                mid_time_s,
                group,
            } => {
                base_idx.push(n + index);
                type_idx.push(1);
                time_idx.push(bin_of(mid_time_s, format!("utterance {index}"))?);
                group_idx.push(group);
            }
            SeqSlot::Group { group } => {
                base_idx.push(q_row);
                type_idx.push(2); // zero row: group tokens carry no type
                time_idx.push(time_bins); // zero row: and no time embedding
                group_idx.push(group);
            }
        }
    }
    for _ in 0..pad_tokens {
        base_idx.push(pad_row);
        type_idx.push(2);
        time_idx.push(time_bins);
        group_idx.push(cfg.max_groups); // zero row of the extended table
    }

    let base = g.gather_rows(stacked, Arc::new(base_idx))?;

    let type_param = g.param(&params.type_table);
    let zero1 = g.constant(Tensor::zeros(&[1, d]));
    let type_ext = g.concat_rows(&[type_param, zero1])?;
    let type_rows = g.gather_rows(type_ext, Arc::new(type_idx))?;

    let time_param = g.param(&params.time_table);
    let zero2 = g.constant(Tensor::zeros(&[1, d]));
    let time_ext = g.concat_rows(&[time_param, zero2])?;
    let time_rows = g.gather_rows(time_ext, Arc::new(time_idx))?;

    let group_param = g.param(&params.group_table);
    let zero3 = g.constant(Tensor::zeros(&[1, d]));
    let group_ext = g.concat_rows(&[group_param, zero3])?;
    let group_rows = g.gather_rows(group_ext, Arc::new(group_idx))?;

    let s1 = g.add(base, type_rows)?;
    let s2 = g.add(s1, time_rows)?;
    let tokens = g.add(s2, group_rows)?;
    params.input_norm.forward(g, tokens)
}

/// Negatives-to-positives ratio of labels binarized at `threshold`.
pub fn positive_weight(labels: &[f64], threshold: f64) -> f64 {
    let pos = labels.iter().filter(|&&y| y >= threshold).count();
    let neg = labels.len() - pos;
    neg as f64 / (pos.max(1)) as f64
}

/// Weighted binary cross entropy of probabilities against soft targets:
/// mean of `-[w y log p + (1 - y) log(1 - p)]` with `p` clamped away from
/// the endpoints.
fn bce_node<T: Scalar>(
    g: &mut Graph<T>,
    probs: NodeId,
    targets: &[f64],
    weight: f64,
) -> Result<NodeId> {
    let n = targets.len();
    let clamped = g.clamp(probs, sc::<T>(PROB_CLAMP), sc::<T>(1.0 - PROB_CLAMP));
    let log_p = g.ln(clamped);
    let one_minus = g.affine(clamped, sc::<T>(-1.0), T::one());
    let log_q = g.ln(one_minus);
    let wy = g.constant(Tensor::from_vec(
        &[n, 1],
        targets.iter().map(|&y| sc::<T>(weight * y)).collect(),
    )?);
    let comp = g.constant(Tensor::from_vec(
        &[n, 1],
        targets.iter().map(|&y| sc::<T>(1.0 - y)).collect(),
    )?);
    let t1 = g.mul(wy, log_p)?;
    let t2 = g.mul(comp, log_q)?;
    let s = g.add(t1, t2)?;
    let neg = g.affine(s, sc::<T>(-1.0), T::zero());
    Ok(g.mean_all(neg))
}

/// Weighted binary cross entropy on plain vectors: the mean of
/// `-[w y log p + (1 - y) log(1 - p)]` with `p` clamped away from the
/// endpoints. Empty input contributes zero loss.
pub fn weighted_bce(probs: &[f64], targets: &[f64], weight: f64) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for (&p, &y) in probs.iter().zip(targets) {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        total += -(weight * y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    }
    total / probs.len() as f64
}

/// Reference loss on plain score vectors, mirroring the in-graph formula.
pub fn compute_loss(scores: &EpisodeScores, labels: &LabelSet) -> Result<f64> {
    if scores.shot_scores.len() != labels.shot_scores.len()
        || scores.dialog_scores.len() != labels.dialog_scores.len()
    {
        return Err(Error::shape(
            "compute_loss",
            format!(
                "{} shots / {} dialogs",
                labels.shot_scores.len(),
                labels.dialog_scores.len()
            ),
            format!(
                "{} / {}",
                scores.shot_scores.len(),
                scores.dialog_scores.len()
            ),
        ));
    }
    scores.validate()?;
    let theta = labels.binarize_threshold;
    let shot_loss = weighted_bce(
        &scores.shot_scores,
        &labels.shot_scores,
        positive_weight(&labels.shot_scores, theta),
    );
    let dialog_loss = weighted_bce(
        &scores.dialog_scores,
        &labels.dialog_scores,
        positive_weight(&labels.dialog_scores, theta),
    );
    Ok(shot_loss + dialog_loss)
}

/// Run the model over one episode. With `labels`, the graph also carries the
/// weighted-BCE loss node ready for `backward`.
pub fn episode_forward<T: Scalar>(
    episode: &EpisodeFeatures<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    opts: &ForwardOptions,
    labels: Option<&LabelSet>,
    rng: &mut SeedRng,
) -> Result<ForwardPass<T>> {
    episode.validate(cfg)?;
    if let Some(l) = labels {
        if l.shot_scores.len() != episode.num_shots()
            || l.dialog_scores.len() != episode.num_utterances()
        {
            return Err(Error::shape(
                format!("labels for episode {}", episode.id),
                format!(
                    "{} shots / {} dialogs",
                    episode.num_shots(),
                    episode.num_utterances()
                ),
                format!("{} / {}", l.shot_scores.len(), l.dialog_scores.len()),
            ));
        }
    }

    let shot_spans: Vec<(f64, f64)> = episode.shots.iter().map(|s| s.span).collect();
    let utter_spans: Vec<(f64, f64)> = episode.utterances.iter().map(|u| u.span).collect();
    let partition = GroupPartition::build(&shot_spans, &utter_spans, cfg.group_size)?;

    let mode = if opts.train {
        SampleMode::Train
    } else {
        SampleMode::Infer
    };

    let mut g = Graph::new();
    let mut masks = MaskCache::default();

    let mut shot_vecs = Vec::with_capacity(episode.num_shots());
    for shot in &episode.shots {
        let indices = sample_frames(shot.num_frames(), mode, cfg.frame_cap, rng);
        shot_vecs.push(encode_shot(
            &mut g, params, cfg, shot, &indices, &mut masks, opts.train, rng,
        )?);
    }
    let mut utter_vecs = Vec::with_capacity(episode.num_utterances());
    for utterance in &episode.utterances {
        utter_vecs.push(encode_utterance(
            &mut g, params, cfg, utterance, opts.train, rng,
        )?);
    }

    let mut x = assemble_tokens(
        &mut g,
        params,
        cfg,
        &partition,
        &shot_vecs,
        &utter_vecs,
        opts.pad_tokens,
    )?;
    let mask = Arc::new(attention_mask(
        &partition,
        opts.pad_tokens,
        opts.group_clique,
    ));
    for layer in &params.episode_encoder {
        x = layer.forward(&mut g, x, &mask, opts.train, cfg.attn_dropout, rng)?;
    }

    let dropped = g.dropout(x, cfg.head_dropout, opts.train, rng)?;
    let logits = params.classifier.forward(&mut g, dropped)?;

    let shot_logits = g.gather_rows(logits, Arc::new(partition.shot_positions()))?;
    let shot_probs = g.sigmoid(shot_logits);
    let dialog_probs = if episode.num_utterances() > 0 {
        let dl = g.gather_rows(logits, Arc::new(partition.dialog_positions()))?;
        Some(g.sigmoid(dl))
    } else {
        None
    };

    let extract = |g: &Graph<T>, node: NodeId| -> Vec<f64> {
        g.value(node)
            .data()
            .iter()
            .map(|v| v.to_f64_c().clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))
            .collect()
    };
    let scores = EpisodeScores {
        shot_scores: extract(&g, shot_probs),
        dialog_scores: dialog_probs.map(|n| extract(&g, n)).unwrap_or_default(),
    };
    scores.validate()?;

    let (loss, loss_value) = if let Some(l) = labels {
        let theta = l.binarize_threshold;
        let w_s = positive_weight(&l.shot_scores, theta);
        let mut total = bce_node(&mut g, shot_probs, &l.shot_scores, w_s)?;
        if let Some(dp) = dialog_probs {
            let w_u = positive_weight(&l.dialog_scores, theta);
            let dialog_loss = bce_node(&mut g, dp, &l.dialog_scores, w_u)?;
            total = g.add(total, dialog_loss)?;
        }
        let value = g.value(total).scalar_value().to_f64_c();
        (Some(total), Some(value))
    } else {
        (None, None)
    };

    Ok(ForwardPass {
        graph: g,
        partition,
        scores,
        shot_probs,
        dialog_probs,
        loss,
        loss_value,
    })
}

/// Deterministic inference: uniform frame sampling, no dropout.
pub fn predict<T: Scalar>(
    episode: &EpisodeFeatures<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<EpisodeScores> {
    let mut rng = crate::rng_from_seed(0);
    let pass = episode_forward(
        episode,
        params,
        cfg,
        &ForwardOptions::default(),
        None,
        &mut rng,
    )?;
    Ok(pass.scores)
}
