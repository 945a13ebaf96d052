use serde::{Deserialize, Serialize};

use super::layers::{normal, Conv1d, Gru, Linear};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::text::{TokenId, EOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemanticConfig {
    pub vocab_size: usize,
    pub feat_dim: usize,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    pub word_dim: usize,
    pub embed_dim: usize,
    /// Hinge ranking margin used in pretraining.
    pub margin: f64,
}

impl SemanticConfig {
    pub fn new(vocab_size: usize, feat_dim: usize) -> Self {
        Self {
            vocab_size,
            feat_dim,
            conv_channels: 64,
            conv_kernel: 3,
            word_dim: 64,
            embed_dim: 128,
            margin: 0.2,
        }
    }
}

/// Audio–caption matcher: a small CNN with temporal mean pooling on the audio
/// side, embeddings plus a GRU on the caption side, scored by the cosine of
/// the two unit-normalised embeddings.
#[derive(Clone, Debug)]
pub struct SemanticEvaluator {
    config: SemanticConfig,
    store: ParamStore,
    conv1: Conv1d,
    conv2: Conv1d,
    audio_out: Linear,
    embed: ParamId,
    gru: Gru,
}

impl SemanticEvaluator {
    pub fn new(config: SemanticConfig, seed: u64) -> Result<Self> {
        let c = &config;
        if c.vocab_size < 5 || c.feat_dim == 0 || c.conv_channels == 0 || c.embed_dim == 0 || c.word_dim == 0 {
            return Err(Error::Config(format!("invalid semantic evaluator dimensions: {c:?}")));
        }
        let mut r = rng::stream(seed, "init-semantic", 0);
        let mut store = ParamStore::new();
        let conv1 = Conv1d::new(&mut store, "audio.conv1", c.feat_dim, c.conv_channels, c.conv_kernel, &mut r)?;
        let conv2 = Conv1d::new(&mut store, "audio.conv2", c.conv_channels, c.conv_channels, c.conv_kernel, &mut r)?;
        let audio_out = Linear::new(&mut store, "audio.out", c.conv_channels, c.embed_dim, &mut r)?;
        let embed = store.add("text.embed", normal(&mut r, c.vocab_size, c.word_dim, 0.1)?)?;
        let gru = Gru::new(&mut store, "text.gru", c.word_dim, c.embed_dim, &mut r)?;
        Ok(Self {
            config,
            store,
            conv1,
            conv2,
            audio_out,
            embed,
            gru,
        })
    }

    pub fn config(&self) -> &SemanticConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Unit-norm audio embeddings `[B × embed_dim]`.
    pub fn audio_embed(&self, tape: &mut Tape, features: &[&Tensor]) -> Result<Var> {
        if features.is_empty() {
            return Err(Error::Contract("no clips to embed".into()));
        }
        let mut pooled = Vec::with_capacity(features.len());
        for f in features {
            let x = tape.constant((*f).clone());
            let h = self.conv1.forward(tape, &self.store, x)?;
            let h = tape.relu(h);
            let h = self.conv2.forward(tape, &self.store, h)?;
            let h = tape.relu(h);
            pooled.push(tape.mean_rows(h)?);
        }
        let p = if pooled.len() == 1 { pooled[0] } else { tape.concat_rows(&pooled)? };
        let e = self.audio_out.forward(tape, &self.store, p)?;
        tape.l2_normalize_rows(e)
    }

    /// Unit-norm caption embeddings `[B × embed_dim]`; captions are given in
    /// content-plus-`<eos>` form.
    pub fn caption_embed(&self, tape: &mut Tape, captions: &[Vec<TokenId>]) -> Result<Var> {
        if captions.is_empty() || captions.iter().any(Vec::is_empty) {
            return Err(Error::Contract("semantic evaluator needs non-empty captions".into()));
        }
        let steps = captions.iter().map(Vec::len).max().unwrap_or(0);
        let lengths: Vec<usize> = captions.iter().map(Vec::len).collect();
        let table = tape.param(&self.store, self.embed);
        let mut inputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let ids: Vec<TokenId> = captions.iter().map(|c| c.get(t).copied().unwrap_or(EOS)).collect();
            inputs.push(tape.rows(table, &ids)?);
        }
        let h = self.gru.run(tape, &self.store, &inputs, &lengths)?;
        tape.l2_normalize_rows(h)
    }

    /// Cosine score `s ∈ [−1, 1]` for each `(clip, caption)` pair.
    pub fn scores(&self, features: &[&Tensor], captions: &[Vec<TokenId>]) -> Result<Vec<f64>> {
        if features.len() != captions.len() {
            return Err(Error::Contract("semantic scores need one caption per clip".into()));
        }
        let mut tape = Tape::inference();
        let a = self.audio_embed(&mut tape, features)?;
        let c = self.caption_embed(&mut tape, captions)?;
        let a = tape.value(a);
        let c = tape.value(c);
        Ok((0..captions.len())
            .map(|i| cosine_of_unit(a.row_slice(i), c.row_slice(i)))
            .collect())
    }

    pub fn score(&self, features: &Tensor, caption: &[TokenId]) -> Result<f64> {
        Ok(self.scores(&[features], &[caption.to_vec()])?[0])
    }

    /// Bidirectional hinge ranking loss with in-batch negatives, averaged
    /// over the batch:
    /// `Σ_{j≠i} max(0, m − s(a_i,c_i) + s(a_i,c_j)) + max(0, m − s(a_i,c_i) + s(a_j,c_i))`.
    pub fn ranking_loss(&self, tape: &mut Tape, features: &[&Tensor], captions: &[Vec<TokenId>]) -> Result<Var> {
        let b = features.len();
        if b < 2 || captions.len() != b {
            return Err(Error::Degenerate("ranking loss needs at least two paired clips".into()));
        }
        let a = self.audio_embed(tape, features)?;
        let c = self.caption_embed(tape, captions)?;
        let ct = tape.transpose(c)?;
        let s = tape.matmul(a, ct)?;
        let st = tape.transpose(s)?;
        let diag_idx: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i * b + i, b)).collect();
        let diag = tape.take(s, &diag_idx, &[b, b])?;
        let mut off = vec![1.0; b * b];
        for i in 0..b {
            off[i * b + i] = 0.0;
        }
        let off = tape.constant(Tensor::matrix(b, b, off)?);
        let mut total = None;
        for neg in [s, st] {
            let h = tape.sub(neg, diag)?;
            let h = tape.add_scalar(h, self.config.margin);
            let h = tape.relu(h);
            let h = tape.mul(h, off)?;
            let h = tape.sum(h);
            total = Some(match total {
                None => h,
                Some(t) => tape.add(t, h)?,
            });
        }
        let total = total.expect("two terms");
        Ok(tape.scale(total, 1.0 / b as f64))
    }
}

/// Dot product of two unit vectors, clamped against rounding into `[−1, 1]`.
pub fn cosine_of_unit(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_model_gradients;

    #[test]
    fn cosine_identity_and_orthogonality() {
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::matrix(2, 2, vec![3.0, 4.0, 0.0, 2.0]).unwrap());
        let n = tape.l2_normalize_rows(x).unwrap();
        let v = tape.value(n);
        assert_eq!(cosine_of_unit(v.row_slice(0), v.row_slice(0)), 1.0);
        assert_eq!(cosine_of_unit(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
    }

    fn small() -> SemanticEvaluator {
        let cfg = SemanticConfig {
            conv_channels: 3,
            word_dim: 3,
            embed_dim: 4,
            ..SemanticConfig::new(9, 2)
        };
        SemanticEvaluator::new(cfg, 4).unwrap()
    }

    #[test]
    fn scores_are_cosines() {
        let se = small();
        let mut r = rng::stream(3, "f", 0);
        let f = normal(&mut r, 4, 2, 1.0).unwrap();
        let s = se.score(&f, &[5, 6, EOS]).unwrap();
        assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn ranking_loss_gradients_match_finite_differences() {
        let mut se = small();
        let mut r = rng::stream(3, "f", 1);
        let feats: Vec<Tensor> = (0..3).map(|i| normal(&mut r, 3 + i, 2, 1.0).unwrap()).collect();
        let caps = vec![vec![4, 5, EOS], vec![6, EOS], vec![7, 8, 4, EOS]];
        // A large margin keeps every hinge active, away from its kink.
        se.config.margin = 5.0;
        // nonzero biases keep ReLU inputs off their kink at all-zero frames
        for id in se.params().ids().collect::<Vec<_>>() {
            if se.params().name(id).ends_with(".b") {
                let n = se.params().get(id).len();
                let fresh = normal(&mut r, 1, n, 0.5).unwrap();
                se.params_mut().get_mut(id).data_mut().copy_from_slice(fresh.data());
            }
        }
        let fr: Vec<&Tensor> = feats.iter().collect();
        let report = check_model_gradients(&mut se, SemanticEvaluator::params_mut, 1e-5, None, |tape, m| {
            m.ranking_loss(tape, &fr, &caps)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn ranking_loss_needs_two_pairs() {
        let se = small();
        let f = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut tape = Tape::new();
        assert!(se.ranking_loss(&mut tape, &[&f], &[vec![4, EOS]]).is_err());
    }
}
