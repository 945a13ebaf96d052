//! Greedy, sampled and beam-search caption generation.

use std::cmp::Ordering;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{DecodeState, EncodedClip, Generator};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::text::{TokenId, EOS, SOS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Sample,
    Beam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub beam_size: usize,
    pub max_len: usize,
    pub temperature: f64,
    pub seed: u64,
    pub n_captions: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Beam,
            beam_size: 5,
            max_len: crate::text::DEFAULT_MAX_LEN,
            temperature: 1.0,
            seed: 0,
            n_captions: 5,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.n_captions == 0 {
            return Err(Error::Config("n_captions must be at least 1".into()));
        }
        Ok(())
    }
}

/// Autoregressive next-token model as seen by the decoders.
pub trait StepModel {
    type State: Clone;

    fn start(&self) -> Self::State;
    /// Logits for the position after each state's current prefix.
    fn logits(&self, states: &mut [Self::State]) -> Result<Vec<Vec<f64>>>;
    fn push(&self, state: &mut Self::State, token: TokenId);
    /// Longest content length; at that length only `<eos>` may follow.
    fn max_len(&self) -> usize;
}

/// A [`Generator`] bound to one clip and one noise vector.
pub struct GeneratorStepper<'a> {
    generator: &'a Generator,
    memory: Arc<EncodedClip>,
    max_len: usize,
}

impl<'a> GeneratorStepper<'a> {
    pub fn new(generator: &'a Generator, features: &Tensor, z: &[f64]) -> Result<Self> {
        Ok(Self {
            generator,
            memory: generator.encode_clip(features, z)?,
            max_len: generator.config().max_len,
        })
    }

    /// Caps the content length below the generator's own limit.
    pub fn with_max_len(mut self, max_len: usize) -> Self {
        self.max_len = max_len.min(self.generator.config().max_len);
        self
    }
}

impl StepModel for GeneratorStepper<'_> {
    type State = DecodeState;

    fn start(&self) -> DecodeState {
        DecodeState::new(self.memory.clone())
    }

    fn logits(&self, states: &mut [DecodeState]) -> Result<Vec<Vec<f64>>> {
        self.generator.advance(states)
    }

    fn push(&self, state: &mut DecodeState, token: TokenId) {
        state.push(token);
    }

    fn max_len(&self) -> usize {
        self.max_len
    }
}

/// A finished or truncated caption.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// Content tokens, markers excluded.
    pub tokens: Vec<TokenId>,
    /// Sum of per-step log-probabilities, the final `<eos>` included.
    pub log_prob: f64,
    /// Length-normalised score used for ranking.
    pub score: f64,
    /// False when the length limit forced the `<eos>`.
    pub finished: bool,
}

impl Decoded {
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// `<sos> content <eos>`.
    pub fn framed(&self) -> Vec<TokenId> {
        let mut v = Vec::with_capacity(self.tokens.len() + 2);
        v.push(SOS);
        v.extend_from_slice(&self.tokens);
        v.push(EOS);
        v
    }
}

/// A multinomial draw with its per-step log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Sampled {
    pub tokens: Vec<TokenId>,
    /// One entry per emitted token, the final `<eos>` included.
    pub log_probs: Vec<f64>,
    pub finished: bool,
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_index(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let total: f64 = probs.iter().sum();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p / total;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

fn length_normalised(log_prob: f64, emitted: usize) -> f64 {
    log_prob / emitted.max(1) as f64
}

/// Argmax decoding until `<eos>` or the length limit.
pub fn greedy_decode<M: StepModel>(model: &M) -> Result<Decoded> {
    let mut state = model.start();
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    loop {
        let logits = model.logits(std::slice::from_mut(&mut state))?.remove(0);
        let lp = log_softmax(&logits);
        let forced = tokens.len() >= model.max_len();
        let tok = if forced { EOS } else { argmax(&logits) };
        log_prob += lp[tok];
        if tok == EOS {
            let emitted = tokens.len() + 1;
            return Ok(Decoded {
                tokens,
                log_prob,
                score: length_normalised(log_prob, emitted),
                finished: !forced || argmax(&logits) == EOS,
            });
        }
        tokens.push(tok);
        model.push(&mut state, tok);
    }
}

/// Multinomial sampling from `softmax(logits / temperature)` at every step.
pub fn sample_decode<M: StepModel>(model: &M, temperature: f64, rng: &mut Rng) -> Result<Sampled> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let mut state = model.start();
    let mut tokens = Vec::new();
    let mut log_probs = Vec::new();
    loop {
        let logits = model.logits(std::slice::from_mut(&mut state))?.remove(0);
        let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
        let lp = log_softmax(&scaled);
        let forced = tokens.len() >= model.max_len();
        let tok = if forced {
            EOS
        } else {
            let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
            sample_index(&probs, rng)
        };
        log_probs.push(lp[tok]);
        if tok == EOS {
            return Ok(Sampled {
                tokens,
                log_probs,
                finished: !forced,
            });
        }
        tokens.push(tok);
        model.push(&mut state, tok);
    }
}

struct Hyp<S> {
    state: S,
    tokens: Vec<TokenId>,
    log_prob: f64,
}

/// Length-normalised beam search.
///
/// Each step ranks the `2k` best one-token extensions by cumulative
/// log-probability. An `<eos>` extension ranked within the first `k` is
/// retired as a finished hypothesis; the first `k` non-`<eos>` extensions
/// continue. The search ends once `k` hypotheses have finished. Results are
/// ordered by `log_prob / emitted_tokens`, best first.
pub fn beam_decode<M: StepModel>(model: &M, beam_size: usize) -> Result<Vec<Decoded>> {
    if beam_size == 0 {
        return Err(Error::Config("beam_size must be at least 1".into()));
    }
    let mut beams = vec![Hyp {
        state: model.start(),
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    let mut finished: Vec<Decoded> = Vec::new();
    while !beams.is_empty() && finished.len() < beam_size {
        let mut states: Vec<M::State> = beams.iter().map(|h| h.state.clone()).collect();
        let all_logits = model.logits(&mut states)?;
        // (cumulative log-prob, beam index, token)
        let mut cands: Vec<(f64, usize, TokenId)> = Vec::new();
        for (b, logits) in all_logits.iter().enumerate() {
            let lp = log_softmax(logits);
            if beams[b].tokens.len() >= model.max_len() {
                cands.push((beams[b].log_prob + lp[EOS], b, EOS));
            } else {
                cands.extend(lp.iter().enumerate().map(|(t, &l)| (beams[b].log_prob + l, b, t)));
            }
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        cands.truncate(2 * beam_size);
        let mut next = Vec::with_capacity(beam_size);
        for (rank, &(lp, b, tok)) in cands.iter().enumerate() {
            if tok == EOS {
                if rank < beam_size && finished.len() < beam_size {
                    let tokens = beams[b].tokens.clone();
                    let emitted = tokens.len() + 1;
                    let forced = tokens.len() >= model.max_len();
                    finished.push(Decoded {
                        tokens,
                        log_prob: lp,
                        score: length_normalised(lp, emitted),
                        finished: !forced,
                    });
                }
            } else if next.len() < beam_size {
                let mut state = states[b].clone();
                model.push(&mut state, tok);
                let mut tokens = beams[b].tokens.clone();
                tokens.push(tok);
                next.push(Hyp {
                    state,
                    tokens,
                    log_prob: lp,
                });
            }
        }
        beams = next;
    }
    finished.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    finished.truncate(beam_size);
    Ok(finished)
}

/// Which caption-set generation protocol to follow.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiverseMode {
    /// Zero noise, the top distinct beam hypotheses.
    Mle,
    /// One fresh noise vector per caption, each decoded by beam search.
    Gan,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiverseSet {
    pub captions: Vec<Decoded>,
    /// True when fewer than the requested number of captions were produced.
    pub short: bool,
}

/// Several captions for one clip. In GAN mode caption `i` uses noise from the
/// substream `(seed, clip_index, i)`, so sets are reproducible per clip.
pub fn generate_diverse_set(
    generator: &Generator,
    features: &Tensor,
    mode: DiverseMode,
    settings: &DecodeConfig,
    clip_index: u64,
) -> Result<DiverseSet> {
    settings.validate()?;
    let n = settings.n_captions;
    let stepper = |z: &[f64]| -> Result<GeneratorStepper<'_>> {
        Ok(GeneratorStepper::new(generator, features, z)?.with_max_len(settings.max_len))
    };
    let captions = match mode {
        DiverseMode::Mle => {
            let mut beams = beam_decode(&stepper(&generator.zero_noise())?, settings.beam_size.max(n))?;
            beams.truncate(n);
            beams
        }
        DiverseMode::Gan => {
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let mut r = rng::stream2(settings.seed, "z-generate", clip_index, i as u64);
                let z = generator.sample_noise(&mut r);
                if let Some(best) = beam_decode(&stepper(&z)?, settings.beam_size)?.into_iter().next() {
                    out.push(best);
                }
            }
            out
        }
    };
    Ok(DiverseSet {
        short: captions.len() < n,
        captions,
    })
}

/// One line of a caption file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionRecord {
    pub clip_id: String,
    pub captions: Vec<String>,
    pub scores: Vec<f64>,
}

pub fn write_captions(path: &Path, records: &[CaptionRecord]) -> Result<()> {
    let mut body = Vec::new();
    for r in records {
        if r.captions.len() != r.scores.len() {
            return Err(Error::clip(&r.clip_id, "caption and score counts differ"));
        }
        if r.scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::clip(&r.clip_id, "non-finite caption score"));
        }
        serde_json::to_writer(&mut body, r)?;
        body.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn read_captions(path: &Path) -> Result<Vec<CaptionRecord>> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: CaptionRecord = serde_json::from_str(line).map_err(|e| Error::Format {
            path: path.to_owned(),
            reason: format!("line {}: {e}", n + 1),
        })?;
        if rec.captions.len() != rec.scores.len() {
            return Err(Error::Format {
                path: path.to_owned(),
                reason: format!("line {}: caption and score counts differ", n + 1),
            });
        }
        out.push(rec);
    }
    Ok(out)
}
