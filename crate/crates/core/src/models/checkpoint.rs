//! Binary checkpoint format.
//!
//! ```text
//! "DCCKPT01" | u32 version | str kind | u32 epoch | u64 seed | u64 config_hash
//! | str model_config_json | u32 n | n × entry
//! | u8 has_optimizer [ u64 step | u32 n | n × entry (m) | n × entry (v) ]
//! entry = str name | u8 dtype (0 = f32, 1 = f64) | u32 ndims | ndims × u32 | payload
//! str   = u32 byte length | UTF-8 bytes
//! ```
//! All integers and floats are little-endian. Entries are written as f64 so a
//! reload reproduces parameters bit for bit; f32 payloads are accepted.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, SemanticConfig, SemanticEvaluator};
use crate::error::{Error, Result};
use crate::tensor::AdamState;
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DCCKPT01";
pub const CHECKPOINT_VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Generator,
    Discriminator,
    SemanticEvaluator,
}

impl ModelKind {
    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::Generator => "generator",
            ModelKind::Discriminator => "discriminator",
            ModelKind::SemanticEvaluator => "semantic-evaluator",
        }
    }
}

/// Training metadata stored next to the parameters.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub epoch: u32,
    pub seed: u64,
    pub config_hash: u64,
}

/// A network that can be checkpointed.
pub trait Model: Sized {
    const KIND: ModelKind;
    type Config: Serialize + DeserializeOwned;

    fn build(config: Self::Config, seed: u64) -> Result<Self>;
    fn model_config(&self) -> &Self::Config;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
}

macro_rules! impl_model {
    ($ty:ty, $cfg:ty, $kind:expr) => {
        impl Model for $ty {
            const KIND: ModelKind = $kind;
            type Config = $cfg;

            fn build(config: $cfg, seed: u64) -> Result<Self> {
                <$ty>::new(config, seed)
            }
            fn model_config(&self) -> &$cfg {
                self.config()
            }
            fn store(&self) -> &ParamStore {
                self.params()
            }
            fn store_mut(&mut self) -> &mut ParamStore {
                self.params_mut()
            }
        }
    };
}

impl_model!(Generator, GeneratorConfig, ModelKind::Generator);
impl_model!(Discriminator, DiscriminatorConfig, ModelKind::Discriminator);
impl_model!(SemanticEvaluator, SemanticConfig, ModelKind::SemanticEvaluator);

/// A loaded model with its metadata and, if saved, optimizer state.
pub struct Checkpoint<M> {
    pub model: M,
    pub meta: CheckpointMeta,
    pub optimizer: Option<AdamState>,
}

/// Stable 64-bit digest of a configuration's text form.
pub fn config_hash(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_entry(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    put_str(out, name);
    out.push(DTYPE_F64);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint<M: Model>(model: &M, meta: &CheckpointMeta, optimizer: Option<&AdamState>) -> Result<Vec<u8>> {
    let store = model.store();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_str(&mut out, M::KIND.tag());
    out.extend_from_slice(&meta.epoch.to_le_bytes());
    out.extend_from_slice(&meta.seed.to_le_bytes());
    out.extend_from_slice(&meta.config_hash.to_le_bytes());
    put_str(&mut out, &serde_json::to_string(model.model_config())?);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, name, t) in store.iter() {
        put_entry(&mut out, name, t.shape(), t.data());
    }
    match optimizer {
        None => out.push(0),
        Some(state) => {
            // An optimizer that never stepped has no moments yet; store zeros,
            // which is exactly what its first step would start from.
            let zeros: Vec<Vec<f64>>;
            let (m, v) = if state.step == 0 && state.m.is_empty() && state.v.is_empty() {
                zeros = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
                (&zeros, &zeros)
            } else {
                (&state.m, &state.v)
            };
            if m.len() != store.len() || v.len() != store.len() {
                return Err(Error::Checkpoint("optimizer state does not match the parameter set".into()));
            }
            out.push(1);
            out.extend_from_slice(&state.step.to_le_bytes());
            out.extend_from_slice(&(store.len() as u32).to_le_bytes());
            for (moment, tag) in [(m, "m"), (v, "v")] {
                for ((_, name, _), values) in store.iter().zip(moment) {
                    put_entry(&mut out, &format!("optim/{tag}/{name}"), &[values.len()], values);
                }
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }

    fn entry(&mut self) -> Result<(String, Vec<usize>, Vec<f64>)> {
        let name = self.str()?;
        let dtype = self.u8()?;
        let ndims = self.u32()? as usize;
        if ndims == 0 || ndims > 8 {
            return Err(Error::Checkpoint(format!("entry {name}: bad rank {ndims}")));
        }
        let shape: Vec<usize> = (0..ndims).map(|_| self.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let data = match dtype {
            DTYPE_F64 => self
                .take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("entry too large".into()))?)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            DTYPE_F32 => self
                .take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("entry too large".into()))?)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            other => return Err(Error::Checkpoint(format!("entry {name}: unknown dtype {other}"))),
        };
        Ok((name, shape, data))
    }
}

pub fn decode_checkpoint<M: Model>(bytes: &[u8]) -> Result<Checkpoint<M>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let kind = r.str()?;
    if kind != M::KIND.tag() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds a {kind}, expected a {}",
            M::KIND.tag()
        )));
    }
    let meta = CheckpointMeta {
        epoch: r.u32()?,
        seed: r.u64()?,
        config_hash: r.u64()?,
    };
    let config: M::Config = serde_json::from_str(&r.str()?)
        .map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
    let mut model = M::build(config, meta.seed)?;
    let count = r.u32()? as usize;
    if count != model.store().len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {count} parameters, model expects {}",
            model.store().len()
        )));
    }
    let mut loaded = Vec::with_capacity(count);
    for _ in 0..count {
        let (name, shape, data) = r.entry()?;
        let id = model
            .store()
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {name}")))?;
        if model.store().get(id).shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: shape {shape:?} does not match {:?}",
                model.store().get(id).shape()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("parameter {name} holds non-finite values")));
        }
        loaded.push((id, Tensor::new(&shape, data)?));
    }
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let n = r.u32()? as usize;
            if n != count {
                return Err(Error::Checkpoint("optimizer state does not match the parameter set".into()));
            }
            let mut moments = [Vec::with_capacity(n), Vec::with_capacity(n)];
            for (tag, moment) in ["m", "v"].iter().zip(moments.iter_mut()) {
                for (_, name, t) in model.store().iter() {
                    let (ename, _, data) = r.entry()?;
                    if ename != format!("optim/{tag}/{name}") || data.len() != t.len() {
                        return Err(Error::Checkpoint(format!("malformed optimizer entry {ename}")));
                    }
                    moment.push(data);
                }
            }
            let [m, v] = moments;
            Some(AdamState { step, m, v })
        }
        other => return Err(Error::Checkpoint(format!("bad optimizer flag {other}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    for (id, mut t) in loaded {
        t.set_requires_grad(true);
        *model.store_mut().get_mut(id) = t;
    }
    Ok(Checkpoint { model, meta, optimizer })
}

/// Writes via a temporary sibling file and a rename, so readers never see a
/// partial checkpoint.
pub fn save_checkpoint<M: Model>(
    path: &Path,
    model: &M,
    meta: &CheckpointMeta,
    optimizer: Option<&AdamState>,
) -> Result<()> {
    let bytes = encode_checkpoint(model, meta, optimizer)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<M: Model>(path: &Path) -> Result<Checkpoint<M>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::SOS;

    fn tiny_generator() -> Generator {
        let cfg = GeneratorConfig {
            d_model: 8,
            heads: 2,
            ff_dim: 8,
            layers: 1,
            noise_dim: 2,
            ..GeneratorConfig::new(9, 3)
        };
        Generator::new(cfg, 5).unwrap()
    }

    #[test]
    fn generator_round_trip_is_exact() {
        let g = tiny_generator();
        let meta = CheckpointMeta {
            epoch: 3,
            seed: 5,
            config_hash: 77,
        };
        let bytes = encode_checkpoint(&g, &meta, None).unwrap();
        let back: Checkpoint<Generator> = decode_checkpoint(&bytes).unwrap();
        assert!(back.model.params().same_values(g.params()));
        assert_eq!(back.meta, meta);
        assert_eq!(encode_checkpoint(&back.model, &back.meta, None).unwrap(), bytes);
        let f = Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(
            g.step_logits(&f, &[0.3, 0.1], &[SOS]).unwrap(),
            back.model.step_logits(&f, &[0.3, 0.1], &[SOS]).unwrap()
        );
    }

    #[test]
    fn optimizer_state_round_trips() {
        let g = tiny_generator();
        let state = AdamState {
            step: 4,
            m: g.params().iter().map(|(_, _, t)| vec![0.25; t.len()]).collect(),
            v: g.params().iter().map(|(_, _, t)| vec![0.5; t.len()]).collect(),
        };
        let bytes = encode_checkpoint(&g, &CheckpointMeta::default(), Some(&state)).unwrap();
        let back: Checkpoint<Generator> = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.optimizer, Some(state));
    }

    #[test]
    fn unstepped_optimizer_saves_as_zero_moments() {
        let g = tiny_generator();
        let bytes = encode_checkpoint(&g, &CheckpointMeta::default(), Some(&AdamState::default())).unwrap();
        let back: Checkpoint<Generator> = decode_checkpoint(&bytes).unwrap();
        let state = back.optimizer.unwrap();
        assert_eq!(state.step, 0);
        assert!(state.m.iter().chain(&state.v).flatten().all(|&x| x == 0.0));
        assert_eq!(encode_checkpoint(&back.model, &back.meta, Some(&state)).unwrap(), bytes);
    }

    #[test]
    fn truncation_and_wrong_kind_are_rejected() {
        let g = tiny_generator();
        let bytes = encode_checkpoint(&g, &CheckpointMeta::default(), None).unwrap();
        for cut in [4, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(decode_checkpoint::<Generator>(&bytes[..cut]).is_err());
        }
        assert!(matches!(
            decode_checkpoint::<Discriminator>(&bytes),
            Err(Error::Checkpoint(_))
        ));
        let mut bad = bytes.clone();
        bad[8] = 2;
        assert!(decode_checkpoint::<Generator>(&bad).is_err());
    }

    #[test]
    fn f32_payloads_are_accepted() {
        let mut out = Vec::new();
        put_str(&mut out, "w");
        out.push(DTYPE_F32);
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&1.5f32.to_le_bytes());
        out.extend_from_slice(&(-2.0f32).to_le_bytes());
        let mut r = Reader { buf: &out, pos: 0 };
        let (name, shape, data) = r.entry().unwrap();
        assert_eq!((name.as_str(), shape, data), ("w", vec![2], vec![1.5, -2.0]));
    }
}
