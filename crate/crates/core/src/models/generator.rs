use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::layers::{causal_mask, dropout, normal, positions, Attention, Conv1d, LayerNorm, Linear};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::text::{TokenId, DEFAULT_MAX_LEN, SOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub vocab_size: usize,
    pub feat_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub layers: usize,
    pub noise_dim: usize,
    pub conv_kernel: usize,
    pub dropout: f64,
    /// Longest content length (markers excluded).
    pub max_len: usize,
}

impl GeneratorConfig {
    pub fn new(vocab_size: usize, feat_dim: usize) -> Self {
        Self {
            vocab_size,
            feat_dim,
            d_model: 128,
            heads: 4,
            ff_dim: 256,
            layers: 2,
            noise_dim: 64,
            conv_kernel: 3,
            dropout: 0.1,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: Attention,
    ln1: LayerNorm,
    cross_attn: Attention,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln3: LayerNorm,
}

/// Encoder over frame features plus a noise-conditioned transformer decoder.
///
/// The noise vector `z` is appended to every encoder frame output and the
/// result projected back to the model width; the decoder cross-attends to
/// that memory.
#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    store: ParamStore,
    enc_conv: Conv1d,
    enc_proj: Linear,
    noise_proj: Linear,
    embed: ParamId,
    layers: Vec<DecoderLayer>,
    out: Linear,
}

/// Per-layer cross-attention keys and values for one `(clip, z)` pair.
#[derive(Debug)]
pub struct EncodedClip {
    k: Vec<Tensor>,
    v: Vec<Tensor>,
}

/// One partial hypothesis during incremental decoding.
#[derive(Clone, Debug)]
pub struct DecodeState {
    memory: Arc<EncodedClip>,
    self_k: Vec<Vec<f64>>,
    self_v: Vec<Vec<f64>>,
    cached: usize,
    tokens: Vec<TokenId>,
}

impl DecodeState {
    pub fn new(memory: Arc<EncodedClip>) -> Self {
        let layers = memory.k.len();
        Self {
            memory,
            self_k: vec![Vec::new(); layers],
            self_v: vec![Vec::new(); layers],
            cached: 0,
            tokens: vec![SOS],
        }
    }

    /// Tokens so far, starting with `<sos>`.
    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn push(&mut self, token: TokenId) {
        self.tokens.push(token);
    }
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        let c = &config;
        if c.vocab_size < 5 || c.feat_dim == 0 || c.d_model == 0 || c.layers == 0 {
            return Err(Error::Config(format!("invalid generator dimensions: {c:?}")));
        }
        if !(0.0..1.0).contains(&c.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0,1), got {}", c.dropout)));
        }
        let mut r = rng::stream(seed, "init-generator", 0);
        let mut store = ParamStore::new();
        let d = c.d_model;
        let enc_conv = Conv1d::new(&mut store, "enc.conv", c.feat_dim, d, c.conv_kernel, &mut r)?;
        let enc_proj = Linear::new(&mut store, "enc.proj", d, d, &mut r)?;
        let noise_proj = Linear::new(&mut store, "enc.noise", d + c.noise_dim, d, &mut r)?;
        let embed = store.add("dec.embed", normal(&mut r, c.vocab_size, d, (d as f64).powf(-0.5))?)?;
        let mut layers = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let p = format!("dec.{l}");
            layers.push(DecoderLayer {
                self_attn: Attention::new(&mut store, &format!("{p}.self"), d, c.heads, &mut r)?,
                ln1: LayerNorm::new(&mut store, &format!("{p}.ln1"), d)?,
                cross_attn: Attention::new(&mut store, &format!("{p}.cross"), d, c.heads, &mut r)?,
                ln2: LayerNorm::new(&mut store, &format!("{p}.ln2"), d)?,
                ff1: Linear::new(&mut store, &format!("{p}.ff1"), d, c.ff_dim, &mut r)?,
                ff2: Linear::new(&mut store, &format!("{p}.ff2"), c.ff_dim, d, &mut r)?,
                ln3: LayerNorm::new(&mut store, &format!("{p}.ln3"), d)?,
            });
        }
        let out = Linear::new(&mut store, "dec.out", d, c.vocab_size, &mut r)?;
        Ok(Self {
            config,
            store,
            enc_conv,
            enc_proj,
            noise_proj,
            embed,
            layers,
            out,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn zero_noise(&self) -> Vec<f64> {
        vec![0.0; self.config.noise_dim]
    }

    pub fn sample_noise(&self, rng: &mut Rng) -> Vec<f64> {
        (0..self.config.noise_dim).map(|_| StandardNormal.sample(rng)).collect()
    }

    /// Encoder memory `[frames × d_model]` for one clip.
    pub fn encode(&self, tape: &mut Tape, features: &Tensor, z: &[f64]) -> Result<Var> {
        let (frames, dim) = features.dims2()?;
        if dim != self.config.feat_dim {
            return Err(Error::shape(format!(
                "generator expects {}-dim features, got {dim}",
                self.config.feat_dim
            )));
        }
        if z.len() != self.config.noise_dim {
            return Err(Error::shape(format!(
                "noise vector has {} entries, expected {}",
                z.len(),
                self.config.noise_dim
            )));
        }
        let store = &self.store;
        let x = tape.constant(features.clone());
        let h = self.enc_conv.forward(tape, store, x)?;
        let h = tape.relu(h);
        let h = self.enc_proj.forward(tape, store, h)?;
        let h = tape.relu(h);
        let tiled: Vec<f64> = (0..frames).flat_map(|_| z.iter().copied()).collect();
        let zt = tape.constant(Tensor::matrix(frames, z.len(), tiled)?);
        let joined = tape.concat_cols(&[h, zt])?;
        self.noise_proj.forward(tape, store, joined)
    }

    fn embed_tokens(&self, tape: &mut Tape, tokens: &[TokenId], pos: Vec<f64>) -> Result<Var> {
        let d = self.config.d_model;
        let table = tape.param(&self.store, self.embed);
        let e = tape.rows(table, tokens)?;
        let e = tape.scale(e, (d as f64).sqrt());
        let p = tape.constant(Tensor::matrix(tokens.len(), d, pos)?);
        tape.add(e, p)
    }

    /// Teacher-forced logits `[B·steps × vocab]` for `B` clips whose decoder
    /// inputs are the rows of `inputs` (`B × steps`, row-major). Dropout is
    /// applied only when `train_rng` is given.
    pub fn forward(
        &self,
        tape: &mut Tape,
        features: &[&Tensor],
        noise: &[&[f64]],
        inputs: &[TokenId],
        steps: usize,
        mut train_rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let b = features.len();
        if noise.len() != b || inputs.len() != b * steps || steps == 0 {
            return Err(Error::shape("generator forward: batch sizes disagree"));
        }
        if steps > self.config.max_len + 1 {
            return Err(Error::Contract(format!(
                "decoder input of {steps} positions exceeds the limit of {}",
                self.config.max_len + 1
            )));
        }
        let d = self.config.d_model;
        let p = self.config.dropout;
        let store = &self.store;

        let mut memory = Vec::with_capacity(b);
        for (f, z) in features.iter().zip(noise) {
            memory.push(self.encode(tape, f, z)?);
        }
        let pos = positions(0, steps, d);
        let pos: Vec<f64> = (0..b).flat_map(|_| pos.iter().copied()).collect();
        let mut x = self.embed_tokens(tape, inputs, pos)?;
        if let Some(r) = train_rng.as_deref_mut() {
            x = dropout(tape, x, p, r)?;
        }
        let mask = tape.constant(causal_mask(steps)?);
        for layer in &self.layers {
            let att = &layer.self_attn;
            let q = att.q.forward(tape, store, x)?;
            let k = att.k.forward(tape, store, x)?;
            let v = att.v.forward(tape, store, x)?;
            let mut parts = Vec::with_capacity(b);
            for i in 0..b {
                let qi = tape.slice_rows(q, i * steps, steps)?;
                let ki = tape.slice_rows(k, i * steps, steps)?;
                let vi = tape.slice_rows(v, i * steps, steps)?;
                parts.push(att.attend(tape, qi, ki, vi, Some(mask))?);
            }
            let a = concat_rows(tape, &parts)?;
            let a = att.o.forward(tape, store, a)?;
            x = self.residual(tape, x, a, &layer.ln1, train_rng.as_deref_mut())?;

            let att = &layer.cross_attn;
            let q = att.q.forward(tape, store, x)?;
            let mut parts = Vec::with_capacity(b);
            for (i, &m) in memory.iter().enumerate() {
                let qi = tape.slice_rows(q, i * steps, steps)?;
                let km = att.k.forward(tape, store, m)?;
                let vm = att.v.forward(tape, store, m)?;
                parts.push(att.attend(tape, qi, km, vm, None)?);
            }
            let a = concat_rows(tape, &parts)?;
            let a = att.o.forward(tape, store, a)?;
            x = self.residual(tape, x, a, &layer.ln2, train_rng.as_deref_mut())?;

            let f = layer.ff1.forward(tape, store, x)?;
            let f = tape.relu(f);
            let f = layer.ff2.forward(tape, store, f)?;
            x = self.residual(tape, x, f, &layer.ln3, train_rng.as_deref_mut())?;
        }
        self.out.forward(tape, store, x)
    }

    fn residual(&self, tape: &mut Tape, x: Var, y: Var, ln: &LayerNorm, rng: Option<&mut Rng>) -> Result<Var> {
        let y = match rng {
            Some(r) => dropout(tape, y, self.config.dropout, r)?,
            None => y,
        };
        let s = tape.add(x, y)?;
        ln.forward(tape, &self.store, s)
    }

    /// Next-token logits after `prefix`, which must start with `<sos>`.
    pub fn step_logits(&self, features: &Tensor, z: &[f64], prefix: &[TokenId]) -> Result<Vec<f64>> {
        if prefix.first() != Some(&SOS) {
            return Err(Error::Contract("decoder prefix must start with <sos>".into()));
        }
        let mut tape = Tape::inference();
        let logits = self.forward(&mut tape, &[features], &[z], prefix, prefix.len(), None)?;
        Ok(tape.value(logits).row_slice(prefix.len() - 1).to_vec())
    }

    /// Precomputes cross-attention keys and values for incremental decoding.
    pub fn encode_clip(&self, features: &Tensor, z: &[f64]) -> Result<Arc<EncodedClip>> {
        let mut tape = Tape::inference();
        let m = self.encode(&mut tape, features, z)?;
        let mut k = Vec::with_capacity(self.layers.len());
        let mut v = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let kv = layer.cross_attn.k.forward(&mut tape, &self.store, m)?;
            k.push(tape.value(kv).clone());
            let vv = layer.cross_attn.v.forward(&mut tape, &self.store, m)?;
            v.push(tape.value(vv).clone());
        }
        Ok(Arc::new(EncodedClip { k, v }))
    }

    /// Feeds the newest token of every state through the decoder, extends
    /// the self-attention caches and returns one logit row per state.
    pub fn advance(&self, states: &mut [DecodeState]) -> Result<Vec<Vec<f64>>> {
        if states.is_empty() {
            return Ok(Vec::new());
        }
        let d = self.config.d_model;
        let store = &self.store;
        let mut tokens = Vec::with_capacity(states.len());
        let mut pos = Vec::with_capacity(states.len() * d);
        for s in states.iter() {
            if s.tokens.len() != s.cached + 1 {
                return Err(Error::Contract("decode state must hold exactly one pending token".into()));
            }
            if s.tokens.len() > self.config.max_len + 1 {
                return Err(Error::Contract(format!(
                    "decoder prefix of {} tokens exceeds the limit of {}",
                    s.tokens.len(),
                    self.config.max_len + 1
                )));
            }
            tokens.push(s.tokens[s.cached]);
            pos.extend(positions(s.cached, 1, d));
        }
        let mut tape = Tape::inference();
        let mut x = self.embed_tokens(&mut tape, &tokens, pos)?;
        for (l, layer) in self.layers.iter().enumerate() {
            let att = &layer.self_attn;
            let q = att.q.forward(&mut tape, store, x)?;
            let k = att.k.forward(&mut tape, store, x)?;
            let v = att.v.forward(&mut tape, store, x)?;
            let mut parts = Vec::with_capacity(states.len());
            for (i, s) in states.iter_mut().enumerate() {
                s.self_k[l].extend_from_slice(tape.value(k).row_slice(i));
                s.self_v[l].extend_from_slice(tape.value(v).row_slice(i));
                let n = s.cached + 1;
                let ki = tape.constant(Tensor::matrix(n, d, s.self_k[l].clone())?);
                let vi = tape.constant(Tensor::matrix(n, d, s.self_v[l].clone())?);
                let qi = tape.slice_rows(q, i, 1)?;
                parts.push(att.attend(&mut tape, qi, ki, vi, None)?);
            }
            let a = concat_rows(&mut tape, &parts)?;
            let a = att.o.forward(&mut tape, store, a)?;
            x = self.residual(&mut tape, x, a, &layer.ln1, None)?;

            let att = &layer.cross_attn;
            let q = att.q.forward(&mut tape, store, x)?;
            let mut parts = Vec::with_capacity(states.len());
            for (i, s) in states.iter().enumerate() {
                let km = tape.constant(s.memory.k[l].clone());
                let vm = tape.constant(s.memory.v[l].clone());
                let qi = tape.slice_rows(q, i, 1)?;
                parts.push(att.attend(&mut tape, qi, km, vm, None)?);
            }
            let a = concat_rows(&mut tape, &parts)?;
            let a = att.o.forward(&mut tape, store, a)?;
            x = self.residual(&mut tape, x, a, &layer.ln2, None)?;

            let f = layer.ff1.forward(&mut tape, store, x)?;
            let f = tape.relu(f);
            let f = layer.ff2.forward(&mut tape, store, f)?;
            x = self.residual(&mut tape, x, f, &layer.ln3, None)?;
        }
        for s in states.iter_mut() {
            s.cached += 1;
        }
        let logits = self.out.forward(&mut tape, store, x)?;
        let t = tape.value(logits);
        if !t.all_finite() {
            return Err(Error::NonFinite("generator produced non-finite logits".into()));
        }
        Ok((0..states.len()).map(|i| t.row_slice(i).to_vec()).collect())
    }
}

fn concat_rows(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        tape.concat_rows(parts)
    }
}
