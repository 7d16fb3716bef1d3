//! Named train/val/test splits over an episode catalog.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::labels::read_json;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStyle {
    Intra,
    CrossSeason,
    CrossSeries,
    Custom,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitParts {
    pub train: Vec<String>,
    #[serde(default)]
    pub val: Vec<String>,
    #[serde(default)]
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSpec {
    pub style: SplitStyle,
    pub splits: BTreeMap<String, SplitParts>,
}

impl SplitSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolvedSplit {
    pub name: String,
    pub style: SplitStyle,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    /// Without a validation list, training falls back to selecting on train
    /// loss; flagged so reports make that visible.
    pub val_empty: bool,
}

/// Validate a spec against the episode catalog and resolve each named
/// split: every id must exist and no id may appear in two parts of the
/// same split.
pub fn make_splits(spec: &SplitSpec, catalog: &[String]) -> Result<Vec<ResolvedSplit>> {
    let known: HashSet<&str> = catalog.iter().map(|s| s.as_str()).collect();
    let mut out = Vec::with_capacity(spec.splits.len());
    for (name, parts) in &spec.splits {
        let mut seen: HashSet<&str> = HashSet::new();
        for (part_name, ids) in [
            ("train", &parts.train),
            ("val", &parts.val),
            ("test", &parts.test),
        ] {
            for id in ids {
                if !known.contains(id.as_str()) {
                    return Err(Error::Manifest(format!(
                        "split {name}: unknown episode id {id} in {part_name}"
                    )));
                }
                if !seen.insert(id.as_str()) {
                    return Err(Error::Manifest(format!(
                        "split {name}: episode id {id} appears in more than one part"
                    )));
                }
            }
        }
        out.push(ResolvedSplit {
            name: name.clone(),
            style: spec.style,
            train: parts.train.clone(),
            val: parts.val.clone(),
            test: parts.test.clone(),
            val_empty: parts.val.is_empty(),
        });
    }
    Ok(out)
}
