use rand::seq::SliceRandom;
use rand::Rng;

use super::DatasetSplit;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use crate::text::{TokenId, Vocabulary, PAD};

/// Padded mini-batch. Row `i` of the target matrix is
/// `<sos> w_1 … w_n <eos> <pad>…` with `n ≤ max_len`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub clip_indices: Vec<usize>,
    /// `[B × F_max × feat_dim]`, zero padded along frames.
    pub features: Tensor,
    pub feature_lengths: Vec<usize>,
    /// Row-major `[B × target_width]`.
    pub targets: Vec<TokenId>,
    pub target_width: usize,
    /// Unpadded length of each target row, markers included.
    pub target_lengths: Vec<usize>,
    /// Which of the clip's references each row was built from.
    pub reference_choice: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.clip_indices.len()
    }

    /// Unpadded `[frames × feat_dim]` features of row `i`.
    pub fn features_of(&self, i: usize) -> Tensor {
        let shape = self.features.shape();
        let (f_max, dim) = (shape[1], shape[2]);
        let len = self.feature_lengths[i];
        let start = i * f_max * dim;
        Tensor::matrix(len, dim, self.features.data()[start..start + len * dim].to_vec())
            .expect("batch rows have at least one frame")
    }

    /// Unpadded token row `i`.
    pub fn tokens_of(&self, i: usize) -> &[TokenId] {
        let start = i * self.target_width;
        &self.targets[start..start + self.target_lengths[i]]
    }

    /// True at every non-padding target position.
    pub fn mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.targets.len());
        for &len in &self.target_lengths {
            mask.extend((0..self.target_width).map(|j| j < len));
        }
        mask
    }
}

/// Splits a dataset into padded batches for one epoch.
///
/// The random stream depends only on `(seed, epoch)`: it fixes the shuffle
/// (when enabled) and one uniformly drawn reference per clip.
pub fn make_batches(
    split: &DatasetSplit,
    vocab: &Vocabulary,
    batch_size: usize,
    max_len: usize,
    seed: u64,
    epoch: u64,
    shuffle: bool,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Contract("batch_size must be at least 1".into()));
    }
    let mut r = rng::stream(seed, "batches", epoch);
    let mut order: Vec<usize> = (0..split.len()).collect();
    if shuffle {
        order.shuffle(&mut r);
    }
    let choices: Vec<usize> = (0..split.len())
        .map(|_| r.random_range(0..super::REFERENCES_PER_CLIP))
        .collect();
    let width = max_len + 2;
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let dim = split.get(chunk[0]).feat_dim();
        let f_max = chunk.iter().map(|&i| split.get(i).frames()).max().unwrap_or(1);
        let mut feats = vec![0.0; chunk.len() * f_max * dim];
        let mut feature_lengths = Vec::with_capacity(chunk.len());
        let mut targets = vec![PAD; chunk.len() * width];
        let mut target_lengths = Vec::with_capacity(chunk.len());
        let mut reference_choice = Vec::with_capacity(chunk.len());
        for (row, &ci) in chunk.iter().enumerate() {
            let rec = split.get(ci);
            if rec.feat_dim() != dim {
                return Err(Error::clip(rec.clip_id(), "feature dimension differs within batch"));
            }
            let src = rec.features().data();
            feats[row * f_max * dim..row * f_max * dim + src.len()].copy_from_slice(src);
            feature_lengths.push(rec.frames());
            let choice = choices[ci];
            let words = &rec.references()[choice];
            let words = &words[..words.len().min(max_len)];
            let seq = vocab.encode(words);
            targets[row * width..row * width + seq.ids().len()].copy_from_slice(seq.ids());
            target_lengths.push(seq.ids().len());
            reference_choice.push(choice);
        }
        batches.push(Batch {
            clip_indices: chunk.to_vec(),
            features: Tensor::new(&[chunk.len(), f_max, dim], feats)?,
            feature_lengths,
            targets,
            target_width: width,
            target_lengths,
            reference_choice,
        });
    }
    Ok(batches)
}
