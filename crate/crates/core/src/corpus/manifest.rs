use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_features, write_features, ClipRecord, DatasetSplit, SplitName};
use crate::error::{Error, Result};
use crate::text::normalize_and_tokenize;

/// One manifest row; `feature_file` is relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub feature_file: String,
    pub captions: Vec<String>,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&body).map_err(|e| Error::Format {
        path: path.to_owned(),
        reason: e.to_string(),
    })
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut body = serde_json::to_string_pretty(entries)?;
    body.push('\n');
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Loads every clip of a manifest, validating features and normalising the
/// captions. Errors name the offending clip.
pub fn load_dataset(manifest_path: &Path, name: SplitName) -> Result<DatasetSplit> {
    let entries = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut records = Vec::with_capacity(entries.len());
    for entry in entries {
        let id = entry.clip_id.as_str();
        if entry.captions.len() != super::REFERENCES_PER_CLIP {
            return Err(Error::clip(
                id,
                format!(
                    "expected {} captions, found {}",
                    super::REFERENCES_PER_CLIP,
                    entry.captions.len()
                ),
            ));
        }
        let features = read_features(&base.join(&entry.feature_file))
            .map_err(|e| Error::clip(id, e.to_string()))?;
        let references = entry
            .captions
            .iter()
            .map(|c| normalize_and_tokenize(c))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::clip(id, e.to_string()))?;
        records.push(ClipRecord::new(id, features, references)?);
    }
    DatasetSplit::new(name, records)
}

fn file_stem_for(clip_id: &str) -> String {
    clip_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes `dir/<manifest_name>` plus one feature file per clip under
/// `dir/features/`. Returns the manifest path.
pub fn write_dataset(split: &DatasetSplit, dir: &Path, manifest_name: &str) -> Result<PathBuf> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let mut used = HashSet::new();
    let mut entries = Vec::with_capacity(split.len());
    for r in split.records() {
        let stem = file_stem_for(r.clip_id());
        if !used.insert(stem.clone()) {
            return Err(Error::clip(r.clip_id(), "feature file name collides with another clip"));
        }
        let rel = format!("features/{stem}.dcfeat");
        write_features(&dir.join(&rel), r.features())?;
        entries.push(ManifestEntry {
            clip_id: r.clip_id().to_owned(),
            feature_file: rel,
            captions: r.references().iter().map(|c| c.join(" ")).collect(),
        });
    }
    let path = dir.join(manifest_name);
    write_manifest(&path, &entries)?;
    Ok(path)
}
