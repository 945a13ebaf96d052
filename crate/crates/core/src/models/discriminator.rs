use serde::{Deserialize, Serialize};

use super::layers::{normal, Gru, Linear};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{ParamId, ParamStore, Tape, Var};
use crate::text::{TokenId, EOS, SOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
}

impl DiscriminatorConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 64,
            hidden: 128,
        }
    }
}

/// Caption-only naturalness classifier: embeddings, one GRU layer, and an
/// affine head whose sigmoid is the probability that a caption is real.
#[derive(Clone, Debug)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    store: ParamStore,
    embed: ParamId,
    gru: Gru,
    head: Linear,
}

/// Strips a leading `<sos>` and anything after the first `<eos>`, keeping the
/// `<eos>` itself, so an empty caption still has one input token.
pub fn caption_input(tokens: &[TokenId]) -> Vec<TokenId> {
    let body = tokens.strip_prefix(&[SOS]).unwrap_or(tokens);
    let mut out: Vec<TokenId> = body.iter().copied().take_while(|&t| t != EOS).collect();
    out.push(EOS);
    out
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        if config.vocab_size < 5 || config.embed_dim == 0 || config.hidden == 0 {
            return Err(Error::Config(format!("invalid discriminator dimensions: {config:?}")));
        }
        let mut r = rng::stream(seed, "init-discriminator", 0);
        let mut store = ParamStore::new();
        let embed = store.add("embed", normal(&mut r, config.vocab_size, config.embed_dim, 0.1)?)?;
        let gru = Gru::new(&mut store, "gru", config.embed_dim, config.hidden, &mut r)?;
        let head = Linear::new(&mut store, "head", config.hidden, 1, &mut r)?;
        Ok(Self {
            config,
            store,
            embed,
            gru,
            head,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Logits `[B×1]` for a batch of captions, each given as in
    /// [`caption_input`] form.
    pub fn logits(&self, tape: &mut Tape, captions: &[Vec<TokenId>]) -> Result<Var> {
        if captions.is_empty() || captions.iter().any(Vec::is_empty) {
            return Err(Error::Contract("discriminator needs non-empty captions".into()));
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
        self.head.forward(tape, &self.store, h)
    }

    /// Probability `n` that each caption is human-written.
    pub fn probabilities(&self, captions: &[Vec<TokenId>]) -> Result<Vec<f64>> {
        let mut tape = Tape::inference();
        let l = self.logits(&mut tape, captions)?;
        let p = tape.sigmoid(l);
        Ok(tape.value(p).data().to_vec())
    }

    pub fn score(&self, caption: &[TokenId]) -> Result<f64> {
        Ok(self.probabilities(&[caption_input(caption)])?[0])
    }

    /// Mean over pairs of `−log D(real) − log(1 − D(fake))`.
    pub fn loss(&self, tape: &mut Tape, real: &[Vec<TokenId>], fake: &[Vec<TokenId>]) -> Result<Var> {
        if real.is_empty() || real.len() != fake.len() {
            return Err(Error::Contract("discriminator loss needs equally many real and fake captions".into()));
        }
        let lr = self.logits(tape, real)?;
        let lf = self.logits(tape, fake)?;
        let a = tape.log_sigmoid(lr);
        let nf = tape.neg(lf);
        let b = tape.log_sigmoid(nf);
        let s = tape.add(a, b)?;
        let m = tape.mean(s);
        Ok(tape.neg(m))
    }
}

/// `(real correct + fake correct) / total` at threshold 0.5.
pub fn accuracy(real_probs: &[f64], fake_probs: &[f64]) -> f64 {
    let correct = real_probs.iter().filter(|&&p| p > 0.5).count() + fake_probs.iter().filter(|&&p| p < 0.5).count();
    correct as f64 / (real_probs.len() + fake_probs.len()).max(1) as f64
}
