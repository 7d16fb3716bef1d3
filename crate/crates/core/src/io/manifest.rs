//! Episode manifests: the JSON index tying spans to feature tensor files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::{FrameBank, ShotFrames};
use crate::model::{EpisodeFeatures, ShotFeatures, UtteranceFeatures};
use crate::tensor::Tensor;

use super::labels::{read_json, write_json};
use super::tensor_file::read_tensor;

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestShot {
    pub id: u32,
    pub start_s: f64,
    pub end_s: f64,
    /// One tensor file per backbone, relative to the manifest directory.
    pub features: [String; 3],
    /// Per-frame validity; omitted means all frames are usable.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_frames: Option<Vec<bool>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestUtterance {
    pub id: u32,
    pub start_s: f64,
    pub end_s: f64,
    pub features: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeManifest {
    pub format_version: u32,
    pub episode_id: String,
    pub duration_s: f64,
    pub video_dims: [usize; 3],
    pub dialog_dim: usize,
    pub shots: Vec<ManifestShot>,
    pub utterances: Vec<ManifestUtterance>,
    /// Label file, relative to the manifest directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
}

/// Manifest plus everything it references, loaded and validated.
#[derive(Debug, Clone)]
pub struct LoadedEpisode {
    pub manifest: EpisodeManifest,
    pub features: EpisodeFeatures<f32>,
    /// Per-shot validity flags (all-true when the manifest omits them).
    pub validity: Vec<Vec<bool>>,
    /// Directory the manifest lives in; relative paths resolve against it.
    pub base_dir: PathBuf,
}

impl LoadedEpisode {
    /// Frame bank of one backbone for recap matching.
    pub fn frame_bank(&self, backbone: usize) -> Result<FrameBank<f32>> {
        if backbone >= 3 {
            return Err(Error::invalid(format!(
                "backbone index {backbone} out of range (0..3)"
            )));
        }
        let shots = self
            .features
            .shots
            .iter()
            .zip(&self.validity)
            .map(|(s, valid)| ShotFrames::new(s.features[backbone].clone(), valid.clone()))
            .collect::<Result<Vec<_>>>()?;
        FrameBank::new(shots)
    }

    pub fn shot_spans(&self) -> Vec<(f64, f64)> {
        self.features.shots.iter().map(|s| s.span).collect()
    }

    pub fn utterance_spans(&self) -> Vec<(f64, f64)> {
        self.features.utterances.iter().map(|u| u.span).collect()
    }

    /// Path of the label file referenced by the manifest, if any.
    pub fn label_path(&self) -> Option<PathBuf> {
        self.manifest.labels.as_ref().map(|l| self.base_dir.join(l))
    }
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &EpisodeManifest) -> Result<()> {
    write_json(path, manifest)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<LoadedEpisode> {
    let path = path.as_ref();
    let manifest: EpisodeManifest = read_json(path)?;
    if manifest.format_version != MANIFEST_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: manifest.format_version,
            supported: MANIFEST_FORMAT_VERSION,
        });
    }
    let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();

    if manifest.shots.is_empty() {
        return Err(Error::Manifest(format!(
            "episode {}: no shots",
            manifest.episode_id
        )));
    }
    check_ids_and_spans(
        manifest.shots.iter().map(|s| (s.id, s.start_s, s.end_s)),
        manifest.duration_s,
        &manifest.episode_id,
        "shot",
    )?;
    check_ids_and_spans(
        manifest
            .utterances
            .iter()
            .map(|u| (u.id, u.start_s, u.end_s)),
        manifest.duration_s,
        &manifest.episode_id,
        "utterance",
    )?;

    let mut shots = Vec::with_capacity(manifest.shots.len());
    let mut validity = Vec::with_capacity(manifest.shots.len());
    for shot in &manifest.shots {
        let mut feats: Vec<Tensor<f32>> = Vec::with_capacity(3);
        for (k, rel) in shot.features.iter().enumerate() {
            let t = read_tensor(base_dir.join(rel)).map_err(|e| annotate(e, rel))?;
            if t.dims().len() != 2 || t.cols() != manifest.video_dims[k] {
                return Err(Error::shape(
                    format!("shot {} backbone {k} ({rel})", shot.id),
                    format!("frames x {}", manifest.video_dims[k]),
                    format!("{:?}", t.dims()),
                ));
            }
            feats.push(t);
        }
        let frames = feats[0].rows();
        if feats.iter().any(|f| f.rows() != frames) {
            return Err(Error::Manifest(format!(
                "shot {}: backbones disagree on frame count",
                shot.id
            )));
        }
        let valid = match &shot.valid_frames {
            Some(v) => {
                if v.len() != frames {
                    return Err(Error::Manifest(format!(
                        "shot {}: {} validity flags for {frames} frames",
                        shot.id,
                        v.len()
                    )));
                }
                v.clone()
            }
            None => vec![true; frames],
        };
        validity.push(valid);
        shots.push(ShotFeatures {
            features: [feats[0].clone(), feats[1].clone(), feats[2].clone()],
            span: (shot.start_s, shot.end_s),
        });
    }

    let mut utterances = Vec::with_capacity(manifest.utterances.len());
    for utt in &manifest.utterances {
        let t =
            read_tensor(base_dir.join(&utt.features)).map_err(|e| annotate(e, &utt.features))?;
        if t.dims().len() != 2 || t.cols() != manifest.dialog_dim {
            return Err(Error::shape(
                format!("utterance {} ({})", utt.id, utt.features),
                format!("tokens x {}", manifest.dialog_dim),
                format!("{:?}", t.dims()),
            ));
        }
        utterances.push(UtteranceFeatures {
            tokens: t,
            span: (utt.start_s, utt.end_s),
        });
    }

    let features = EpisodeFeatures {
        id: manifest.episode_id.clone(),
        shots,
        utterances,
        duration_s: manifest.duration_s,
    };

    Ok(LoadedEpisode {
        manifest,
        features,
        validity,
        base_dir,
    })
}

fn annotate(e: Error, file: &str) -> Error {
    match e {
        Error::Io(io) => Error::Manifest(format!("referenced file {file}: {io}")),
        other => other,
    }
}

fn check_ids_and_spans(
    items: impl Iterator<Item = (u32, f64, f64)>,
    duration: f64,
    episode: &str,
    what: &str,
) -> Result<()> {
    let mut prev_end = f64::NEG_INFINITY;
    let mut prev_id: Option<u32> = None;
    for (count, (id, start, end)) in items.enumerate() {
        if id as usize != count {
            return Err(Error::Manifest(format!(
                "episode {episode}: {what} ids must be dense from 0, found {id} at position {count}"
            )));
        }
        if !(start.is_finite() && end.is_finite()) || start < 0.0 || end < start {
            return Err(Error::Manifest(format!(
                "episode {episode}: {what} {id} has invalid span [{start}, {end})"
            )));
        }
        if start < prev_end {
            return Err(Error::Manifest(format!(
                "episode {episode}: {what} {id} starting at {start}s overlaps {what} {} ending at {prev_end}s",
                prev_id.unwrap()
            )));
        }
        if end > duration {
            return Err(Error::Manifest(format!(
                "episode {episode}: {what} {id} ends at {end}s beyond duration {duration}s"
            )));
        }
        prev_end = end;
        prev_id = Some(id);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::tensor_file::write_tensor;
    use tempfile::tempdir;

    fn write_feat(dir: &Path, name: &str, rows: usize, cols: usize) -> String {
        let t = Tensor::from_vec(
            &[rows, cols],
            (0..rows * cols).map(|i| i as f32 * 0.01).collect(),
        )
        .unwrap();
        write_tensor(dir.join(name), &t).unwrap();
        name.to_string()
    }

    fn minimal_manifest(dir: &Path) -> EpisodeManifest {
        EpisodeManifest {
            format_version: 1,
            episode_id: "mini".into(),
            duration_s: 10.0,
            video_dims: [4, 3, 2],
            dialog_dim: 5,
            shots: vec![ManifestShot {
                id: 0,
                start_s: 0.0,
                end_s: 4.0,
                features: [
                    write_feat(dir, "s0_a.tstn", 3, 4),
                    write_feat(dir, "s0_b.tstn", 3, 3),
                    write_feat(dir, "s0_c.tstn", 3, 2),
                ],
                valid_frames: None,
            }],
            utterances: vec![ManifestUtterance {
                id: 0,
                start_s: 1.0,
                end_s: 2.0,
                features: write_feat(dir, "u0.tstn", 2, 5),
            }],
            labels: None,
        }
    }

    #[test]
    fn minimal_manifest_loads() {
        let dir = tempdir().unwrap();
        let m = minimal_manifest(dir.path());
        let path = dir.path().join("manifest.json");
        write_manifest(&path, &m).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded.features.num_shots(), 1);
        assert_eq!(loaded.features.num_utterances(), 1);
        assert_eq!(loaded.validity[0], vec![true; 3]);
        let bank = loaded.frame_bank(0).unwrap();
        assert_eq!(bank.num_shots(), 1);
        assert_eq!(bank.dim(), 4);
    }

    #[test]
    fn dim_mismatch_is_reported() {
        let dir = tempdir().unwrap();
        let mut m = minimal_manifest(dir.path());
        m.video_dims = [32, 3, 2]; // file has 4 cols
        let path = dir.path().join("manifest.json");
        write_manifest(&path, &m).unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("backbone 0"), "{err}");
    }

    #[test]
    fn unordered_spans_name_both_shots() {
        let dir = tempdir().unwrap();
        let mut m = minimal_manifest(dir.path());
        m.shots.push(ManifestShot {
            id: 1,
            start_s: 2.0, // overlaps shot 0 which ends at 4.0
            end_s: 5.0,
            features: m.shots[0].features.clone(),
            valid_frames: None,
        });
        let path = dir.path().join("manifest.json");
        write_manifest(&path, &m).unwrap();
        let err = load_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("shot 1") && err.contains("shot 0"), "{err}");
    }

    #[test]
    fn missing_file_is_structured() {
        let dir = tempdir().unwrap();
        let mut m = minimal_manifest(dir.path());
        m.shots[0].features[1] = "missing.tstn".into();
        let path = dir.path().join("manifest.json");
        write_manifest(&path, &m).unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("missing.tstn"), "{err}");
    }
}
