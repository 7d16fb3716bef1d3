//! Checkpoint directories: an index JSON plus one tensor file per
//! parameter (and optionally per optimizer moment).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::optim::AdamWState;
use crate::rng_from_seed;

use super::labels::{read_json, write_json};
use super::tensor_file::{read_tensor, write_tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    file: String,
    dims: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerEntry {
    name: String,
    m_file: String,
    v_file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointIndex {
    format_version: u32,
    model_config: ModelConfig,
    meta: CheckpointMeta,
    params: Vec<ParamEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    optimizer: Option<OptimizerIndex>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerIndex {
    step: u64,
    moments: Vec<OptimizerEntry>,
}

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub params: ModelParams<f32>,
    pub config: ModelConfig,
    pub meta: CheckpointMeta,
    pub optimizer: Option<AdamWState<f32>>,
}

pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    params: &ModelParams<f32>,
    config: &ModelConfig,
    meta: &CheckpointMeta,
    optimizer: Option<&AdamWState<f32>>,
) -> Result<()> {
    params.validate_finite()?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("params"))?;

    let mut entries = Vec::new();
    for p in params.params() {
        let file = format!("params/{}.tstn", p.name);
        write_tensor(dir.join(&file), &p.value.to_f32())?;
        entries.push(ParamEntry {
            name: p.name.clone(),
            file,
            dims: p.value.dims().to_vec(),
            trainable: p.trainable,
        });
    }

    let optimizer_index = match optimizer {
        Some(state) => {
            std::fs::create_dir_all(dir.join("optim"))?;
            let mut moments = Vec::new();
            for (name, (m, v)) in state.iter() {
                let m_file = format!("optim/{name}.m.tstn");
                let v_file = format!("optim/{name}.v.tstn");
                write_tensor(dir.join(&m_file), m)?;
                write_tensor(dir.join(&v_file), v)?;
                moments.push(OptimizerEntry {
                    name: name.clone(),
                    m_file,
                    v_file,
                });
            }
            Some(OptimizerIndex {
                step: state.step,
                moments,
            })
        }
        None => None,
    };

    let index = CheckpointIndex {
        format_version: CHECKPOINT_FORMAT_VERSION,
        model_config: config.clone(),
        meta: meta.clone(),
        params: entries,
        optimizer: optimizer_index,
    };
    write_json(dir.join("index.json"), &index)
}

/// Load a checkpoint directory. With `expected`, the stored model config
/// must match it exactly.
pub fn load_checkpoint(
    dir: impl AsRef<Path>,
    expected: Option<&ModelConfig>,
) -> Result<LoadedCheckpoint> {
    let dir = dir.as_ref();
    let index: CheckpointIndex = read_json(&dir.join("index.json"))?;
    if index.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: index.format_version,
            supported: CHECKPOINT_FORMAT_VERSION,
        });
    }
    if let Some(req) = expected {
        if *req != index.model_config {
            return Err(Error::ConfigMismatch(format!(
                "requested {req:?} but checkpoint stores {:?}",
                index.model_config
            )));
        }
    }
    index.model_config.validate()?;

    // Rebuild the parameter structure from the config, then overwrite every
    // tensor with the stored bytes. The seed is irrelevant: all values are
    // replaced, and a missing or extra name is an error.
    let mut params = ModelParams::<f32>::init(&index.model_config, &mut rng_from_seed(0))?;
    let mut stored: BTreeMap<&str, &ParamEntry> = BTreeMap::new();
    for e in &index.params {
        if stored.insert(e.name.as_str(), e).is_some() {
            return Err(Error::Checkpoint(format!(
                "parameter {} appears twice in the index",
                e.name
            )));
        }
    }
    let mut used = 0usize;
    for p in params.params_mut() {
        let entry = stored.get(p.name.as_str()).ok_or_else(|| {
            Error::Checkpoint(format!("parameter {} missing from checkpoint", p.name))
        })?;
        let t = read_tensor(dir.join(&entry.file))?;
        if t.dims() != p.value.dims() {
            return Err(Error::Checkpoint(format!(
                "parameter {}: stored dims {:?} do not match config dims {:?}",
                p.name,
                t.dims(),
                p.value.dims()
            )));
        }
        p.value = t;
        p.trainable = entry.trainable;
        p.zero_grad();
        used += 1;
    }
    if used != stored.len() {
        let known: Vec<&str> = params.params().iter().map(|p| p.name.as_str()).collect();
        let extra: Vec<&str> = stored
            .keys()
            .copied()
            .filter(|n| !known.contains(n))
            .collect();
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} unknown parameters: {extra:?}",
            stored.len() - used
        )));
    }

    let optimizer = match &index.optimizer {
        Some(oi) => {
            let mut moments = BTreeMap::new();
            for e in &oi.moments {
                let m = read_tensor(dir.join(&e.m_file))?;
                let v = read_tensor(dir.join(&e.v_file))?;
                moments.insert(e.name.clone(), (m, v));
            }
            Some(AdamWState::from_parts(oi.step, moments))
        }
        None => None,
    };

    Ok(LoadedCheckpoint {
        params,
        config: index.model_config,
        meta: index.meta,
        optimizer,
    })
}

/// Convenience for tests: absolute path of a parameter's tensor file.
pub fn param_file(dir: impl AsRef<Path>, name: &str) -> PathBuf {
    dir.as_ref().join(format!("params/{name}.tstn"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn small_config() -> ModelConfig {
        ModelConfig {
            dim: 8,
            heads: 2,
            shot_layers: 1,
            episode_layers: 1,
            group_size: 4,
            frame_cap: 4,
            video_dims: [6, 5, 4],
            dialog_dim: 7,
            max_groups: 8,
            max_duration_s: 30.0,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempdir().unwrap();
        let cfg = small_config();
        let params = ModelParams::<f32>::init(&cfg, &mut rng_from_seed(42)).unwrap();
        save_checkpoint(dir.path(), &params, &cfg, &CheckpointMeta::default(), None).unwrap();
        let loaded = load_checkpoint(dir.path(), None).unwrap();
        for (a, b) in params.params().iter().zip(loaded.params.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.trainable, b.trainable);
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{}", a.name);
            }
        }
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let dir = tempdir().unwrap();
        let cfg = small_config();
        let params = ModelParams::<f32>::init(&cfg, &mut rng_from_seed(1)).unwrap();
        save_checkpoint(dir.path(), &params, &cfg, &CheckpointMeta::default(), None).unwrap();
        let mut other = cfg.clone();
        other.heads = 4;
        let err = load_checkpoint(dir.path(), Some(&other)).unwrap_err();
        assert!(matches!(err, Error::ConfigMismatch(_)));
    }

    #[test]
    fn truncated_tensor_fails_without_partial_params() {
        let dir = tempdir().unwrap();
        let cfg = small_config();
        let params = ModelParams::<f32>::init(&cfg, &mut rng_from_seed(2)).unwrap();
        save_checkpoint(dir.path(), &params, &cfg, &CheckpointMeta::default(), None).unwrap();
        let victim = param_file(dir.path(), "classifier.weight");
        let bytes = std::fs::read(&victim).unwrap();
        std::fs::write(&victim, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load_checkpoint(dir.path(), None).is_err());
    }

    #[test]
    fn optimizer_state_round_trips() {
        let dir = tempdir().unwrap();
        let cfg = small_config();
        let mut params = ModelParams::<f32>::init(&cfg, &mut rng_from_seed(3)).unwrap();
        let mut state = AdamWState::new();
        for p in params.params_mut() {
            p.grad.fill(0.5);
        }
        crate::optim::adamw_step(
            params.params_mut(),
            &mut state,
            1e-3,
            &crate::optim::AdamWConfig::default(),
        )
        .unwrap();
        save_checkpoint(
            dir.path(),
            &params,
            &cfg,
            &CheckpointMeta { seed: 9, epoch: 1 },
            Some(&state),
        )
        .unwrap();
        let loaded = load_checkpoint(dir.path(), Some(&cfg)).unwrap();
        let lstate = loaded.optimizer.unwrap();
        assert_eq!(lstate.step, 1);
        let (m, _) = lstate.moments("classifier.weight").unwrap();
        let (m0, _) = state.moments("classifier.weight").unwrap();
        assert_eq!(m.data(), m0.data());
        assert_eq!(loaded.meta.epoch, 1);
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let dir = tempdir().unwrap();
        let cfg = small_config();
        let params = ModelParams::<f32>::init(&cfg, &mut rng_from_seed(4)).unwrap();
        save_checkpoint(dir.path(), &params, &cfg, &CheckpointMeta::default(), None).unwrap();
        let index_path = dir.path().join("index.json");
        let text = std::fs::read_to_string(&index_path)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 99");
        std::fs::write(&index_path, text).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path(), None).unwrap_err(),
            Error::UnsupportedVersion { found: 99, .. }
        ));
    }
}
