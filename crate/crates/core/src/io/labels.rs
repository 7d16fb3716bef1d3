//! Label and score JSON files, keyed by shot/utterance id.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::{LabelSet, Provenance};
use crate::model::EpisodeScores;

pub const LABEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelFile {
    pub format_version: u32,
    pub episode_id: String,
    pub provenance: Provenance,
    pub binarize_threshold: f64,
    pub shot_scores: BTreeMap<u32, f64>,
    pub dialog_scores: BTreeMap<u32, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreFile {
    pub format_version: u32,
    pub episode_id: String,
    pub shot_scores: BTreeMap<u32, f64>,
    pub dialog_scores: BTreeMap<u32, f64>,
}

fn to_map(v: &[f64]) -> BTreeMap<u32, f64> {
    v.iter().enumerate().map(|(i, &s)| (i as u32, s)).collect()
}

/// Dense ids 0..n are required; anything else is a structured error.
fn from_map(m: &BTreeMap<u32, f64>, what: &str) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(m.len());
    for (expected, (&id, &score)) in m.iter().enumerate() {
        if id as usize != expected {
            return Err(Error::Manifest(format!(
                "{what}: ids must be dense from 0, found {id} at position {expected}"
            )));
        }
        out.push(score);
    }
    Ok(out)
}

pub fn save_labels(path: impl AsRef<Path>, episode_id: &str, labels: &LabelSet) -> Result<()> {
    labels.validate()?;
    let file = LabelFile {
        format_version: LABEL_FORMAT_VERSION,
        episode_id: episode_id.to_string(),
        provenance: labels.provenance.clone(),
        binarize_threshold: labels.binarize_threshold,
        shot_scores: to_map(&labels.shot_scores),
        dialog_scores: to_map(&labels.dialog_scores),
    };
    write_json(path, &file)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<(String, LabelSet)> {
    let file: LabelFile = read_json(path.as_ref())?;
    if file.format_version != LABEL_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: file.format_version,
            supported: LABEL_FORMAT_VERSION,
        });
    }
    let labels = LabelSet {
        shot_scores: from_map(&file.shot_scores, "shot_scores")?,
        dialog_scores: from_map(&file.dialog_scores, "dialog_scores")?,
        provenance: file.provenance,
        binarize_threshold: file.binarize_threshold,
    };
    labels.validate()?;
    Ok((file.episode_id, labels))
}

pub fn save_scores(path: impl AsRef<Path>, episode_id: &str, scores: &EpisodeScores) -> Result<()> {
    scores.validate()?;
    let file = ScoreFile {
        format_version: LABEL_FORMAT_VERSION,
        episode_id: episode_id.to_string(),
        shot_scores: to_map(&scores.shot_scores),
        dialog_scores: to_map(&scores.dialog_scores),
    };
    write_json(path, &file)
}

pub fn load_scores(path: impl AsRef<Path>) -> Result<(String, EpisodeScores)> {
    let file: ScoreFile = read_json(path.as_ref())?;
    if file.format_version != LABEL_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: file.format_version,
            supported: LABEL_FORMAT_VERSION,
        });
    }
    let scores = EpisodeScores {
        shot_scores: from_map(&file.shot_scores, "shot_scores")?,
        dialog_scores: from_map(&file.dialog_scores, "dialog_scores")?,
    };
    scores.validate()?;
    Ok((file.episode_id, scores))
}

pub(crate) fn write_json<S: Serialize>(path: impl AsRef<Path>, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub(crate) fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn label_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("labels.json");
        let labels = LabelSet {
            shot_scores: vec![1.0, 0.5, 0.0],
            dialog_scores: vec![0.25],
            provenance: Provenance::RecapDerived,
            binarize_threshold: 0.5,
        };
        save_labels(&path, "ep-1", &labels).unwrap();
        let (id, back) = load_labels(&path).unwrap();
        assert_eq!(id, "ep-1");
        assert_eq!(back.shot_scores, labels.shot_scores);
        assert_eq!(back.dialog_scores, labels.dialog_scores);
        assert_eq!(back.provenance, Provenance::RecapDerived);
    }

    #[test]
    fn sparse_ids_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("labels.json");
        let json = serde_json::json!({
            "format_version": 1,
            "episode_id": "e",
            "provenance": "recap_derived",
            "binarize_threshold": 0.5,
            "shot_scores": {"0": 1.0, "2": 0.5},
            "dialog_scores": {}
        });
        std::fs::write(&path, serde_json::to_string(&json).unwrap()).unwrap();
        let err = load_labels(&path).unwrap_err();
        assert!(err.to_string().contains("dense"), "{err}");
    }

    #[test]
    fn out_of_range_scores_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("labels.json");
        let labels = LabelSet {
            shot_scores: vec![1.5],
            dialog_scores: vec![],
            provenance: Provenance::Annotator("x".into()),
            binarize_threshold: 0.5,
        };
        assert!(save_labels(&path, "e", &labels).is_err());
    }
}
