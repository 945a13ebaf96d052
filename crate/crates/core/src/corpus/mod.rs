//! Dataset records, on-disk formats, the synthetic corpus and batching.

mod batch;
mod features;
mod manifest;
mod synthetic;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use batch::{make_batches, Batch};
pub use features::{read_features, write_features, FEATURE_MAGIC};
pub use manifest::{load_dataset, read_manifest, write_dataset, write_manifest, ManifestEntry};
pub use synthetic::{generate_synthetic_corpus, SyntheticConfig, SyntheticCorpus};

/// Number of human references per clip.
pub const REFERENCES_PER_CLIP: usize = 5;

/// One clip: a precomputed feature sequence and its five tokenised
/// reference captions.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    clip_id: String,
    features: Tensor,
    references: Vec<Vec<String>>,
}

impl ClipRecord {
    pub fn new(clip_id: impl Into<String>, features: Tensor, references: Vec<Vec<String>>) -> Result<Self> {
        let clip_id = clip_id.into();
        if references.len() != REFERENCES_PER_CLIP {
            return Err(Error::clip(
                clip_id,
                format!(
                    "expected {REFERENCES_PER_CLIP} reference captions, found {}",
                    references.len()
                ),
            ));
        }
        if references.iter().any(Vec::is_empty) {
            return Err(Error::clip(clip_id, "empty reference caption"));
        }
        let (frames, _) = features
            .dims2()
            .map_err(|e| Error::clip(clip_id.clone(), e.to_string()))?;
        if frames == 0 {
            return Err(Error::clip(clip_id, "feature sequence has no frames"));
        }
        if !features.all_finite() {
            return Err(Error::clip(clip_id, "non-finite feature value"));
        }
        Ok(Self {
            clip_id,
            features,
            references,
        })
    }

    pub fn clip_id(&self) -> &str {
        &self.clip_id
    }

    /// `[frames × feat_dim]`
    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn feat_dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn references(&self) -> &[Vec<String>] {
        &self.references
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Evaluation,
}

/// Named list of clips with unique ids.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub name: SplitName,
    records: Vec<ClipRecord>,
}

impl DatasetSplit {
    pub fn new(name: SplitName, records: Vec<ClipRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.clip_id()) {
                return Err(Error::clip(r.clip_id(), "duplicate clip id in split"));
            }
        }
        Ok(Self { name, records })
    }

    pub fn records(&self) -> &[ClipRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, i: usize) -> &ClipRecord {
        &self.records[i]
    }

    pub fn find(&self, clip_id: &str) -> Option<&ClipRecord> {
        self.records.iter().find(|r| r.clip_id() == clip_id)
    }

    pub fn feat_dim(&self) -> Option<usize> {
        self.records.first().map(ClipRecord::feat_dim)
    }

    /// Every reference caption, in clip order.
    pub fn reference_token_lists(&self) -> Vec<Vec<String>> {
        self.records
            .iter()
            .flat_map(|r| r.references().iter().cloned())
            .collect()
    }
}
