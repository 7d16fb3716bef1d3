//! Synthetic episodes with planted important segments.
//!
//! Each shot draws its frames around a latent vector; shots inside a
//! planted segment alternate between two shared latents, reproducing the
//! thread pattern where one recap shot matches several episode shots. The
//! recap contains a trimmed, re-noised copy of a member shot per thread
//! latent, so matching can recover every planted shot. The planted truth is
//! returned as a label set.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::{inherit_dialog_labels, LabelSet, Provenance};
use crate::model::{EpisodeFeatures, ModelConfig, ShotFeatures, UtteranceFeatures};
use crate::tensor::Tensor;
use crate::{rng_from_seed, SeedRng};

use super::labels::save_labels;
use super::manifest::{write_manifest, EpisodeManifest, ManifestShot, ManifestUtterance};
use super::tensor_file::write_tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_shots: usize,
    pub num_utterances: usize,
    pub video_dims: [usize; 3],
    pub dialog_dim: usize,
    /// Inclusive range of frames per shot.
    pub frames_per_shot: (usize, usize),
    pub planted_segments: usize,
    /// Inclusive range of consecutive shots per planted segment.
    pub segment_width: (usize, usize),
    /// Minimum unplanted shots between segments (and clear of round-off
    /// interactions with label smoothing).
    pub min_segment_gap: usize,
    /// Fraction of a source shot's frames copied into its recap shot.
    pub recap_trim_fraction: f64,
    /// Standard deviation of the noise around each latent.
    pub noise_sigma: f64,
    /// Inclusive range of shot durations in seconds.
    pub shot_length_s: (f64, f64),
    /// Inclusive range of tokens per utterance.
    pub tokens_per_utterance: (usize, usize),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            num_shots: 50,
            num_utterances: 30,
            video_dims: [16, 12, 8],
            dialog_dim: 24,
            frames_per_shot: (4, 10),
            planted_segments: 3,
            segment_width: (3, 5),
            min_segment_gap: 12,
            recap_trim_fraction: 0.5,
            noise_sigma: 0.01,
            shot_length_s: (1.5, 4.5),
            tokens_per_utterance: (2, 6),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_shots == 0 {
            return Err(Error::invalid("num_shots must be positive"));
        }
        if self.frames_per_shot.0 == 0 || self.frames_per_shot.0 > self.frames_per_shot.1 {
            return Err(Error::invalid("frames_per_shot range is invalid"));
        }
        if self.segment_width.0 == 0 || self.segment_width.0 > self.segment_width.1 {
            return Err(Error::invalid("segment_width range is invalid"));
        }
        if self.tokens_per_utterance.0 == 0
            || self.tokens_per_utterance.0 > self.tokens_per_utterance.1
        {
            return Err(Error::invalid("tokens_per_utterance range is invalid"));
        }
        if self.planted_segments * self.segment_width.1 > self.num_shots {
            return Err(Error::invalid(format!(
                "{} planted segments of width up to {} exceed {} shots",
                self.planted_segments, self.segment_width.1, self.num_shots
            )));
        }
        if !(0.0..=1.0).contains(&self.recap_trim_fraction) || self.recap_trim_fraction == 0.0 {
            return Err(Error::invalid("recap_trim_fraction must be in (0, 1]"));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::invalid("noise_sigma must be non-negative"));
        }
        if !(self.shot_length_s.0 > 0.0 && self.shot_length_s.0 <= self.shot_length_s.1) {
            return Err(Error::invalid("shot_length_s range is invalid"));
        }
        Ok(())
    }
}

pub struct SynthOutput {
    pub config: SynthConfig,
    pub episode: EpisodeFeatures<f32>,
    pub recap: EpisodeFeatures<f32>,
    /// Planted ground truth: shots inside planted segments are positive.
    pub truth: LabelSet,
    pub planted_shots: Vec<usize>,
}

fn gaussian(rng: &mut SeedRng) -> f64 {
    StandardNormal.sample(rng)
}

fn latent(rng: &mut SeedRng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| gaussian(rng)).collect()
}

fn noisy_frame(latent: &[f64], sigma: f64, rng: &mut SeedRng) -> Vec<f64> {
    latent.iter().map(|&v| v + sigma * gaussian(rng)).collect()
}

fn to_f32_matrix(rows: &[Vec<f64>]) -> Tensor<f32> {
    let cols = rows[0].len();
    let data: Vec<f32> = rows
        .iter()
        .flat_map(|r| r.iter().map(|&v| v as f32))
        .collect();
    Tensor::from_vec(&[rows.len(), cols], data).unwrap()
}

/// Deterministically generate an episode, its recap, and the planted truth.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut rng = rng_from_seed(cfg.seed);
    let n = cfg.num_shots;

    // Segment placement with the required gaps.
    let widths: Vec<usize> = (0..cfg.planted_segments)
        .map(|_| rng.gen_range(cfg.segment_width.0..=cfg.segment_width.1))
        .collect();
    let gaps_needed = cfg.min_segment_gap * cfg.planted_segments.saturating_sub(1);
    let used: usize = widths.iter().sum::<usize>() + gaps_needed;
    if used > n {
        return Err(Error::invalid(format!(
            "cannot place {} segments (total width {} + gaps {gaps_needed}) in {n} shots",
            cfg.planted_segments,
            widths.iter().sum::<usize>()
        )));
    }
    let mut slack = n - used;
    let mut segments: Vec<(usize, usize)> = Vec::with_capacity(widths.len());
    let mut cursor = 0usize;
    for (i, &w) in widths.iter().enumerate() {
        let extra = if slack > 0 {
            rng.gen_range(0..=slack)
        } else {
            0
        };
        slack -= extra;
        cursor += extra;
        segments.push((cursor, cursor + w));
        cursor += w;
        if i + 1 < widths.len() {
            cursor += cfg.min_segment_gap;
        }
    }

    let mut planted = vec![false; n];
    for &(s, e) in &segments {
        for x in s..e {
            planted[x] = true;
        }
    }

    // Per-shot latents per backbone; planted segments alternate between two
    // thread latents.
    let mut latents: Vec<[Vec<f64>; 3]> = Vec::with_capacity(n);
    for _ in 0..n {
        latents.push([
            latent(&mut rng, cfg.video_dims[0]),
            latent(&mut rng, cfg.video_dims[1]),
            latent(&mut rng, cfg.video_dims[2]),
        ]);
    }
    for &(s, e) in &segments {
        let thread_a = latents[s].clone();
        let thread_b: [Vec<f64>; 3] = [
            latent(&mut rng, cfg.video_dims[0]),
            latent(&mut rng, cfg.video_dims[1]),
            latent(&mut rng, cfg.video_dims[2]),
        ];
        for (offset, shot) in (s..e).enumerate() {
            latents[shot] = if offset % 2 == 0 {
                thread_a.clone()
            } else {
                thread_b.clone()
            };
        }
    }

    // Shot spans tile the timeline; frames are latent + noise.
    let mut shots = Vec::with_capacity(n);
    let mut frame_values: Vec<[Vec<Vec<f64>>; 3]> = Vec::with_capacity(n);
    let mut t = 0.0f64;
    for latent3 in latents.iter() {
        let frames = rng.gen_range(cfg.frames_per_shot.0..=cfg.frames_per_shot.1);
        let len = rng.gen_range(cfg.shot_length_s.0..=cfg.shot_length_s.1);
        let mut per_backbone: [Vec<Vec<f64>>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for k in 0..3 {
            for _ in 0..frames {
                per_backbone[k].push(noisy_frame(&latent3[k], cfg.noise_sigma, &mut rng));
            }
        }
        shots.push(ShotFeatures {
            features: [
                to_f32_matrix(&per_backbone[0]),
                to_f32_matrix(&per_backbone[1]),
                to_f32_matrix(&per_backbone[2]),
            ],
            span: (t, t + len),
        });
        frame_values.push(per_backbone);
        t += len;
    }
    let duration = t;

    // Utterances: one per equal slice of the timeline, random sub-span,
    // tokens drawn around a per-utterance latent.
    let mut utterances = Vec::with_capacity(cfg.num_utterances);
    if cfg.num_utterances > 0 {
        let slice = duration / cfg.num_utterances as f64;
        if slice < 0.5 {
            return Err(Error::invalid(format!(
                "{} utterances do not fit in {duration:.1}s without overlap",
                cfg.num_utterances
            )));
        }
        for i in 0..cfg.num_utterances {
            let lo = i as f64 * slice;
            let len = rng.gen_range(0.3..=(slice * 0.9).max(0.31));
            let start = lo + rng.gen_range(0.0..=(slice - len).max(0.001));
            let tokens = rng.gen_range(cfg.tokens_per_utterance.0..=cfg.tokens_per_utterance.1);
            let base = latent(&mut rng, cfg.dialog_dim);
            let rows: Vec<Vec<f64>> = (0..tokens)
                .map(|_| noisy_frame(&base, cfg.noise_sigma.max(0.05), &mut rng))
                .collect();
            utterances.push(UtteranceFeatures {
                tokens: to_f32_matrix(&rows),
                span: (start, start + len),
            });
        }
    }

    // Recap: per planted segment, a trimmed re-noised copy of one member
    // shot per thread latent (even and odd offsets).
    let mut recap_shots = Vec::new();
    let mut recap_t = 0.0f64;
    for &(s, e) in &segments {
        let mut sources = vec![s];
        if e - s > 1 {
            sources.push(s + 1);
        }
        for src in sources {
            let total = frame_values[src][0].len();
            let keep = ((total as f64 * cfg.recap_trim_fraction).ceil() as usize).clamp(1, total);
            let offset = if total > keep {
                rng.gen_range(0..=(total - keep))
            } else {
                0
            };
            let mut per_backbone: [Vec<Vec<f64>>; 3] = [Vec::new(), Vec::new(), Vec::new()];
            for k in 0..3 {
                for f in offset..offset + keep {
                    per_backbone[k].push(noisy_frame(
                        &frame_values[src][k][f],
                        cfg.noise_sigma,
                        &mut rng,
                    ));
                }
            }
            recap_shots.push(ShotFeatures {
                features: [
                    to_f32_matrix(&per_backbone[0]),
                    to_f32_matrix(&per_backbone[1]),
                    to_f32_matrix(&per_backbone[2]),
                ],
                span: (recap_t, recap_t + 1.0),
            });
            recap_t += 1.0;
        }
    }

    let truth_shots: Vec<f64> = planted.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
    let shot_spans: Vec<(f64, f64)> = shots.iter().map(|s| s.span).collect();
    let utter_spans: Vec<(f64, f64)> = utterances.iter().map(|u| u.span).collect();
    let truth_dialogs = if utter_spans.is_empty() {
        Vec::new()
    } else {
        inherit_dialog_labels(&truth_shots, &shot_spans, &utter_spans)?
    };
    let truth = LabelSet {
        shot_scores: truth_shots,
        dialog_scores: truth_dialogs,
        provenance: Provenance::Annotator("planted-truth".into()),
        binarize_threshold: 0.5,
    };

    let planted_shots = planted
        .iter()
        .enumerate()
        .filter_map(|(i, &p)| p.then_some(i))
        .collect();

    Ok(SynthOutput {
        config: cfg.clone(),
        episode: EpisodeFeatures {
            id: format!("synth-{}", cfg.seed),
            shots,
            utterances,
            duration_s: duration,
        },
        recap: EpisodeFeatures {
            id: format!("synth-{}-recap", cfg.seed),
            shots: recap_shots,
            utterances: Vec::new(),
            duration_s: recap_t.max(1.0),
        },
        truth,
        planted_shots,
    })
}

/// Write an episode's manifest and tensors under `dir`.
fn write_episode(
    dir: &Path,
    features: &EpisodeFeatures<f32>,
    video_dims: [usize; 3],
    dialog_dim: usize,
    labels: Option<&str>,
) -> Result<()> {
    std::fs::create_dir_all(dir.join("shots"))?;
    if !features.utterances.is_empty() {
        std::fs::create_dir_all(dir.join("utts"))?;
    }
    let mut shots = Vec::with_capacity(features.shots.len());
    for (i, shot) in features.shots.iter().enumerate() {
        let mut files: [String; 3] = Default::default();
        for k in 0..3 {
            let rel = format!("shots/{i:04}.k{k}.tstn");
            write_tensor(dir.join(&rel), &shot.features[k])?;
            files[k] = rel;
        }
        shots.push(ManifestShot {
            id: i as u32,
            start_s: shot.span.0,
            end_s: shot.span.1,
            features: files,
            valid_frames: None,
        });
    }
    let mut utterances = Vec::with_capacity(features.utterances.len());
    for (l, utt) in features.utterances.iter().enumerate() {
        let rel = format!("utts/{l:04}.tstn");
        write_tensor(dir.join(&rel), &utt.tokens)?;
        utterances.push(ManifestUtterance {
            id: l as u32,
            start_s: utt.span.0,
            end_s: utt.span.1,
            features: rel,
        });
    }
    let manifest = EpisodeManifest {
        format_version: 1,
        episode_id: features.id.clone(),
        duration_s: features.duration_s,
        video_dims,
        dialog_dim,
        shots,
        utterances,
        labels: labels.map(str::to_string),
    };
    write_manifest(dir.join("manifest.json"), &manifest)
}

/// Materialize a generated pair as `DIR/episode` and `DIR/recap`, with the
/// planted truth at `DIR/episode/labels.json` and a desk-scale model config
/// at `DIR/model_config.json`.
pub fn write_synth(dir: impl AsRef<Path>, out: &SynthOutput) -> Result<()> {
    let dir = dir.as_ref();
    let cfg = &out.config;
    write_episode(
        &dir.join("episode"),
        &out.episode,
        cfg.video_dims,
        cfg.dialog_dim,
        Some("labels.json"),
    )?;
    save_labels(dir.join("episode/labels.json"), &out.episode.id, &out.truth)?;
    write_episode(
        &dir.join("recap"),
        &out.recap,
        cfg.video_dims,
        cfg.dialog_dim,
        None,
    )?;

    let model_config = ModelConfig {
        dim: 32,
        heads: 4,
        shot_layers: 1,
        episode_layers: 2,
        group_size: 20,
        frame_cap: 25,
        video_dims: cfg.video_dims,
        dialog_dim: cfg.dialog_dim,
        max_groups: 64,
        max_duration_s: (out.episode.duration_s * 1.5).max(60.0),
        ..Default::default()
    };
    super::labels::write_json(dir.join("model_config.json"), &model_config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeling::{labels_from_recap, FrameBank, MatchConfig, ShotFrames, SmoothConfig};

    fn small_cfg(seed: u64, sigma: f64) -> SynthConfig {
        SynthConfig {
            seed,
            num_shots: 30,
            num_utterances: 8,
            planted_segments: 2,
            noise_sigma: sigma,
            ..Default::default()
        }
    }

    fn bank(features: &EpisodeFeatures<f32>, backbone: usize) -> FrameBank<f32> {
        FrameBank::new(
            features
                .shots
                .iter()
                .map(|s| ShotFrames::all_valid(s.features[backbone].clone()))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn exact_copies_at_zero_sigma() {
        let out = synth_generate(&small_cfg(7, 0.0)).unwrap();
        // Every recap frame equals some frame of a planted episode shot.
        for rs in &out.recap.shots {
            for f in 0..rs.features[0].rows() {
                let row = rs.features[0].row(f);
                let hit = out
                    .episode
                    .shots
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| out.planted_shots.contains(i))
                    .any(|(_, es)| {
                        (0..es.features[0].rows()).any(|g| es.features[0].row(g) == row)
                    });
                assert!(hit, "recap frame has no exact source");
            }
        }

        // Matching at the default threshold recovers every planted shot.
        let labels = labels_from_recap(
            &bank(&out.episode, 0),
            &out.episode.shots.iter().map(|s| s.span).collect::<Vec<_>>(),
            &out.episode
                .utterances
                .iter()
                .map(|u| u.span)
                .collect::<Vec<_>>(),
            &bank(&out.recap, 0),
            &MatchConfig::default(),
            &SmoothConfig::default(),
        )
        .unwrap();
        for &p in &out.planted_shots {
            assert!(
                labels.shot_scores[p] >= 0.5,
                "planted shot {p} not recovered"
            );
        }
    }

    #[test]
    fn deterministic_from_seed() {
        let a = synth_generate(&small_cfg(3, 0.01)).unwrap();
        let b = synth_generate(&small_cfg(3, 0.01)).unwrap();
        assert_eq!(a.planted_shots, b.planted_shots);
        for (sa, sb) in a.episode.shots.iter().zip(&b.episode.shots) {
            assert_eq!(sa.features[0], sb.features[0]);
            assert_eq!(sa.span, sb.span);
        }
        let c = synth_generate(&small_cfg(4, 0.01)).unwrap();
        assert_ne!(a.planted_shots, c.planted_shots);
    }

    #[test]
    fn impossible_plant_is_rejected() {
        let cfg = SynthConfig {
            num_shots: 5,
            planted_segments: 3,
            segment_width: (3, 3),
            ..Default::default()
        };
        assert!(synth_generate(&cfg).is_err());
    }

    #[test]
    fn truth_marks_only_planted() {
        let out = synth_generate(&small_cfg(11, 0.01)).unwrap();
        for (i, &score) in out.truth.shot_scores.iter().enumerate() {
            assert_eq!(score == 1.0, out.planted_shots.contains(&i));
        }
    }
}
