//! On-disk formats: binary tensors, episode manifests, label/score JSON,
//! split specs, checkpoint directories, and the synthetic-episode
//! generator.
//!
//! Everything numeric crosses the disk boundary as little-endian 32-bit
//! floats (tensors) or JSON numbers (labels, scores, reports). All writers
//! are deterministic: identical inputs give byte-identical files.

mod checkpoint;
mod labels;
mod manifest;
mod splits;
mod synth;
mod tensor_file;

pub use checkpoint::{
    load_checkpoint, param_file, save_checkpoint, CheckpointMeta, LoadedCheckpoint,
};
pub use labels::{load_labels, load_scores, save_labels, save_scores, LabelFile, ScoreFile};
pub use manifest::{
    load_manifest, write_manifest, EpisodeManifest, LoadedEpisode, ManifestShot, ManifestUtterance,
};
pub use splits::{make_splits, ResolvedSplit, SplitSpec, SplitStyle};
pub use synth::{synth_generate, write_synth, SynthConfig, SynthOutput};
pub use tensor_file::{read_tensor, write_tensor, TENSOR_MAGIC, TENSOR_VERSION};
