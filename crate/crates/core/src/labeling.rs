//! Turning a recap into soft story-summarization labels.
//!
//! A recap shot is matched back into the episode by frame-level cosine
//! similarity: mine candidate shots above a threshold, score them through
//! per-recap-frame top-k voting, pick the best shot, then grow a matched
//! set around it within a shot-index window. Matched shots become a binary
//! vector, which triangle smoothing turns into soft scores; dialog
//! utterances inherit the score of the shot containing their mid-timestamp.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Frames of one shot in the matching backbone's embedding space.
#[derive(Debug, Clone)]
pub struct ShotFrames<T> {
    /// `T_i x D_match` embedding matrix.
    pub embeddings: Tensor<T>,
    /// Frames flagged invalid upstream (too dark or bright) never match.
    pub valid: Vec<bool>,
}

impl<T: Scalar> ShotFrames<T> {
    pub fn new(embeddings: Tensor<T>, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != embeddings.rows() {
            return Err(Error::shape(
                "ShotFrames",
                format!("{} validity flags", embeddings.rows()),
                format!("{}", valid.len()),
            ));
        }
        Ok(ShotFrames { embeddings, valid })
    }

    pub fn all_valid(embeddings: Tensor<T>) -> Self {
        let n = embeddings.rows();
        ShotFrames {
            embeddings,
            valid: vec![true; n],
        }
    }

    pub fn num_frames(&self) -> usize {
        self.embeddings.rows()
    }
}

/// All shots of one video in the matching backbone's embedding space.
#[derive(Debug, Clone)]
pub struct FrameBank<T> {
    shots: Vec<ShotFrames<T>>,
    dim: usize,
}

impl<T: Scalar> FrameBank<T> {
    pub fn new(shots: Vec<ShotFrames<T>>) -> Result<Self> {
        if shots.is_empty() {
            return Err(Error::invalid("FrameBank needs at least one shot"));
        }
        let dim = shots[0].embeddings.cols();
        for (i, s) in shots.iter().enumerate() {
            if s.embeddings.cols() != dim {
                return Err(Error::shape(
                    "FrameBank",
                    format!("embedding dim {dim}"),
                    format!("{} in shot {i}", s.embeddings.cols()),
                ));
            }
            if !s.valid.iter().any(|&v| v) {
                return Err(Error::invalid(format!(
                    "shot {i} has no valid frame for matching"
                )));
            }
        }
        Ok(FrameBank { shots, dim })
    }

    pub fn shots(&self) -> &[ShotFrames<T>] {
        &self.shots
    }

    pub fn num_shots(&self) -> usize {
        self.shots.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    /// Minimum cosine similarity for a frame pair to count as a match.
    pub sim_threshold: f64,
    /// Matched frames scored per recap frame.
    pub top_k: usize,
    /// Shot-index radius of the windowed closure (window size `2r + 1`).
    pub window_radius: usize,
    /// Safety cap on closure iterations.
    pub max_rounds: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            sim_threshold: 0.85,
            top_k: 3,
            window_radius: 10,
            max_rounds: 64,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sim_threshold > 0.0 && self.sim_threshold <= 1.0) {
            return Err(Error::invalid(format!(
                "sim_threshold must be in (0, 1], got {}",
                self.sim_threshold
            )));
        }
        if self.top_k == 0 {
            return Err(Error::invalid("top_k must be at least 1"));
        }
        if self.max_rounds == 0 {
            return Err(Error::invalid("max_rounds must be at least 1"));
        }
        Ok(())
    }
}

/// Outcome of matching one recap shot against the episode.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MatchResult {
    /// Episode shots owning any frame above the similarity threshold.
    pub candidates: BTreeSet<usize>,
    /// Accumulated top-k score per candidate shot.
    pub scores: Vec<(usize, f64)>,
    /// Highest-scoring candidate (ties to the lower index).
    pub best_shot: Option<usize>,
    /// Final matched set: the windowed closure around `best_shot`.
    pub matched: BTreeSet<usize>,
    /// Set when the closure stopped at `max_rounds` instead of a fixpoint.
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoothConfig {
    /// Odd triangle window width.
    pub window: usize,
}

impl Default for SmoothConfig {
    fn default() -> Self {
        SmoothConfig { window: 17 }
    }
}

impl SmoothConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "smoothing window must be odd and positive, got {}",
                self.window
            )));
        }
        Ok(())
    }
}

/// Where a label set came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    RecapDerived,
    Annotator(String),
}

/// Soft importance scores for every shot and dialog utterance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelSet {
    pub shot_scores: Vec<f64>,
    pub dialog_scores: Vec<f64>,
    pub provenance: Provenance,
    pub binarize_threshold: f64,
}

impl LabelSet {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: &[f64]| v.iter().all(|&s| (0.0..=1.0).contains(&s));
        if !ok(&self.shot_scores) || !ok(&self.dialog_scores) {
            return Err(Error::invalid("label scores must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.binarize_threshold) {
            return Err(Error::invalid("binarize threshold must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Pairwise cosine similarities between two frame sets.
///
/// Entry `(i, j)` is the cosine of `a`'s frame `i` and `b`'s frame `j`;
/// pairs involving an invalid frame get the sentinel `-2`, which can never
/// pass a similarity threshold.
pub fn cosine_similarity_matrix<T: Scalar>(
    a: &Tensor<T>,
    a_valid: &[bool],
    b: &Tensor<T>,
    b_valid: &[bool],
) -> Result<Tensor<f64>> {
    if a.cols() != b.cols() {
        return Err(Error::shape(
            "cosine_similarity_matrix",
            format!("dim {}", a.cols()),
            format!("{}", b.cols()),
        ));
    }
    if a_valid.len() != a.rows() || b_valid.len() != b.rows() {
        return Err(Error::invalid("validity flags must match frame counts"));
    }
    let norm = |t: &Tensor<T>, valid: &[bool], side: &str| -> Result<Vec<f64>> {
        let mut norms = Vec::with_capacity(t.rows());
        for i in 0..t.rows() {
            let n: f64 = t
                .row(i)
                .iter()
                .map(|v| v.to_f64_c().powi(2))
                .sum::<f64>()
                .sqrt();
            if valid[i] && n == 0.0 {
                return Err(Error::invalid(format!(
                    "zero-norm valid frame {i} on side {side}"
                )));
            }
            norms.push(n);
        }
        Ok(norms)
    };
    let na = norm(a, a_valid, "a")?;
    let nb = norm(b, b_valid, "b")?;

    let mut out = Tensor::<f64>::full(&[a.rows(), b.rows()], -2.0);
    for i in 0..a.rows() {
        if !a_valid[i] {
            continue;
        }
        for j in 0..b.rows() {
            if !b_valid[j] {
                continue;
            }
            let dot: f64 = a
                .row(i)
                .iter()
                .zip(b.row(j))
                .map(|(x, y)| x.to_f64_c() * y.to_f64_c())
                .sum();
            out.data_mut()[i * b.rows() + j] = dot / (na[i] * nb[j]);
        }
    }
    Ok(out)
}

/// Match one recap shot against every shot of the episode.
///
/// Stages: (1) candidate mining above the threshold, (2) per-recap-frame
/// top-k scoring with a per-shot max, (3) best-shot selection, (4) windowed
/// closure around the best shot. An empty candidate set yields an empty
/// result rather than an error.
pub fn match_recap_shot<T: Scalar>(
    recap_shot: &ShotFrames<T>,
    episode: &FrameBank<T>,
    cfg: &MatchConfig,
) -> Result<MatchResult> {
    cfg.validate()?;
    if recap_shot.embeddings.cols() != episode.dim() {
        return Err(Error::shape(
            "match_recap_shot",
            format!("dim {}", episode.dim()),
            format!("{}", recap_shot.embeddings.cols()),
        ));
    }

    let n = episode.num_shots();
    // Per recap frame: every episode frame at or above threshold, as
    // (similarity, shot, frame-within-shot).
    let mut per_recap_frame: Vec<Vec<(f64, usize, usize)>> =
        vec![Vec::new(); recap_shot.num_frames()];
    for (shot_idx, shot) in episode.shots().iter().enumerate() {
        let sims = cosine_similarity_matrix(
            &recap_shot.embeddings,
            &recap_shot.valid,
            &shot.embeddings,
            &shot.valid,
        )?;
        for r in 0..recap_shot.num_frames() {
            for f in 0..shot.num_frames() {
                let s = sims.at(r, f);
                if s >= cfg.sim_threshold {
                    per_recap_frame[r].push((s, shot_idx, f));
                }
            }
        }
    }

    let mut candidates: BTreeSet<usize> = BTreeSet::new();
    for hits in &per_recap_frame {
        candidates.extend(hits.iter().map(|&(_, s, _)| s));
    }
    if candidates.is_empty() {
        return Ok(MatchResult::default());
    }

    // Score: for each recap frame keep its top-k matches (threshold-first),
    // reduce to a per-shot max, and sum those maxima over recap frames.
    let mut score = vec![0.0f64; n];
    for hits in per_recap_frame.iter_mut() {
        // Descending similarity; deterministic tie-break on (shot, frame).
        hits.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let top = &hits[..hits.len().min(cfg.top_k)];
        let mut per_shot_max: Vec<(usize, f64)> = Vec::new();
        for &(s, shot, _) in top {
            match per_shot_max.iter_mut().find(|(sh, _)| *sh == shot) {
                Some((_, m)) => {
                    if s > *m {
                        *m = s;
                    }
                }
                None => per_shot_max.push((shot, s)),
            }
        }
        for (shot, m) in per_shot_max {
            score[shot] += m;
        }
    }

    let mut best = *candidates.iter().next().unwrap();
    for &c in &candidates {
        if score[c] > score[best] {
            best = c;
        }
    }

    // Windowed closure: repeatedly absorb any candidate within
    // `window_radius` of the matched set, until fixpoint or the round cap.
    let mut matched: BTreeSet<usize> = BTreeSet::new();
    matched.insert(best);
    let mut truncated = false;
    let mut rounds = 0;
    loop {
        let mut added = Vec::new();
        for &c in &candidates {
            if matched.contains(&c) {
                continue;
            }
            let near = matched.iter().any(|&m| c.abs_diff(m) <= cfg.window_radius);
            if near {
                added.push(c);
            }
        }
        if added.is_empty() {
            break;
        }
        matched.extend(added);
        rounds += 1;
        if rounds >= cfg.max_rounds {
            truncated = matched.len() < candidates.len()
                && candidates.iter().any(|&c| {
                    !matched.contains(&c)
                        && matched.iter().any(|&m| c.abs_diff(m) <= cfg.window_radius)
                });
            break;
        }
    }

    let scores = candidates.iter().map(|&c| (c, score[c])).collect();
    Ok(MatchResult {
        candidates,
        scores,
        best_shot: Some(best),
        matched,
        truncated,
    })
}

/// Union of the matched sets as a 0/1 vector over the episode's shots.
pub fn binary_labels_from_matches(results: &[MatchResult], n: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; n];
    for r in results {
        for &s in &r.matched {
            if s >= n {
                return Err(Error::invalid(format!(
                    "matched shot id {s} out of range for {n} shots"
                )));
            }
            out[s] = 1.0;
        }
    }
    Ok(out)
}

/// Spread binary labels with a triangular kernel, adding overlaps and
/// clipping at 1.
///
/// With half-width `h = (w - 1) / 2` the kernel is `k(d) = 1 - |d|/(h + 1)`
/// for `|d| <= h`, so the peak is 1 and weights stay strictly positive
/// inside the window.
pub fn triangle_smooth(binary: &[f64], cfg: &SmoothConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if let Some(bad) = binary.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid(format!(
            "triangle_smooth expects a 0/1 vector, got {bad}"
        )));
    }
    let n = binary.len();
    let h = (cfg.window - 1) / 2;
    let mut out = vec![0.0; n];
    for (p, &v) in binary.iter().enumerate() {
        if v != 1.0 {
            continue;
        }
        let lo = p.saturating_sub(h);
        let hi = (p + h).min(n.saturating_sub(1));
        for i in lo..=hi {
            let d = p.abs_diff(i) as f64;
            out[i] += 1.0 - d / (h as f64 + 1.0);
        }
    }
    for v in out.iter_mut() {
        if *v > 1.0 {
            *v = 1.0;
        }
    }
    Ok(out)
}

/// Dialog utterances inherit the score of the shot whose half-open span
/// contains their mid-timestamp; mid-timestamps falling in a gap take the
/// shot with the nearest span boundary (ties to the earlier shot).
pub fn inherit_dialog_labels(
    shot_scores: &[f64],
    shot_spans: &[(f64, f64)],
    utterance_spans: &[(f64, f64)],
) -> Result<Vec<f64>> {
    if shot_spans.is_empty() {
        return Err(Error::invalid("inherit_dialog_labels: empty shot list"));
    }
    if shot_scores.len() != shot_spans.len() {
        return Err(Error::shape(
            "inherit_dialog_labels",
            format!("{} shot scores", shot_spans.len()),
            format!("{}", shot_scores.len()),
        ));
    }
    let mut out = Vec::with_capacity(utterance_spans.len());
    for &(us, ue) in utterance_spans {
        let mid = 0.5 * (us + ue);
        let mut chosen = None;
        for (i, &(ss, se)) in shot_spans.iter().enumerate() {
            if mid >= ss && mid < se {
                chosen = Some(i);
                break;
            }
        }
        let idx = match chosen {
            Some(i) => i,
            None => {
                // Gap: nearest boundary wins, earlier shot on ties.
                let mut best = 0;
                let mut best_dist = f64::INFINITY;
                for (i, &(ss, se)) in shot_spans.iter().enumerate() {
                    let dist = if mid < ss {
                        ss - mid
                    } else {
                        debug_assert!(mid >= se);
                        mid - se
                    };
                    if dist < best_dist {
                        best = i;
                        best_dist = dist;
                    }
                }
                best
            }
        };
        out.push(shot_scores[idx]);
    }
    Ok(out)
}

/// Full label pipeline: match every recap shot, union the matched sets,
/// smooth, and inherit dialog labels.
pub fn labels_from_recap<T: Scalar>(
    episode: &FrameBank<T>,
    shot_spans: &[(f64, f64)],
    utterance_spans: &[(f64, f64)],
    recap: &FrameBank<T>,
    match_cfg: &MatchConfig,
    smooth_cfg: &SmoothConfig,
) -> Result<LabelSet> {
    if shot_spans.len() != episode.num_shots() {
        return Err(Error::shape(
            "labels_from_recap",
            format!("{} shot spans", episode.num_shots()),
            format!("{}", shot_spans.len()),
        ));
    }
    let results: Vec<MatchResult> = recap
        .shots()
        .iter()
        .map(|rs| match_recap_shot(rs, episode, match_cfg))
        .collect::<Result<_>>()?;
    let binary = binary_labels_from_matches(&results, episode.num_shots())?;
    let shot_scores = triangle_smooth(&binary, smooth_cfg)?;
    let dialog_scores = inherit_dialog_labels(&shot_scores, shot_spans, utterance_spans)?;
    let labels = LabelSet {
        shot_scores,
        dialog_scores,
        provenance: Provenance::RecapDerived,
        binarize_threshold: 0.5,
    };
    labels.validate()?;
    Ok(labels)
}
