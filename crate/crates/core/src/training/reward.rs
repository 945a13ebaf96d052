use std::cell::Cell;

use serde::{Deserialize, Serialize};

use super::{Ablation, TrainConfig};
use crate::corpus::ClipRecord;
use crate::error::{Error, Result};
use crate::metrics::{cider, DocFreqTable};
use crate::models::{caption_input, Discriminator, SemanticEvaluator};
use crate::tensor::Tensor;
use crate::text::{TokenId, Vocabulary};

/// Reward of one caption: `total = λ(n + s) + (1 − λ)c`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardBreakdown {
    pub n: f64,
    pub s: f64,
    pub c: f64,
    pub lambda: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn new(n: f64, s: f64, c: f64, lambda: f64) -> Self {
        Self {
            n,
            s,
            c,
            lambda,
            total: lambda * (n + s) + (1.0 - lambda) * c,
        }
    }

    /// Whether `total` equals the mixing formula bit for bit.
    pub fn is_consistent(&self) -> bool {
        self.total == self.lambda * (self.n + self.s) + (1.0 - self.lambda) * self.c
    }
}

/// Which terms the reward uses and how they mix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardSpec {
    pub lambda: f64,
    pub use_n: bool,
    pub use_s: bool,
    pub normalize_cider: bool,
}

impl RewardSpec {
    pub fn from_config(config: &TrainConfig) -> Self {
        let (lambda, use_n, use_s) = match config.ablation {
            Ablation::None => (config.lambda, config.lambda > 0.0, config.lambda > 0.0),
            Ablation::Nd => (1.0, true, false),
            Ablation::Se => (1.0, false, true),
            Ablation::Le => (0.0, false, false),
        };
        Self {
            lambda,
            use_n,
            use_s,
            normalize_cider: config.normalize_cider,
        }
    }
}

/// Scores complete captions with the discriminator, the semantic evaluator
/// and CIDEr, counting how often each network is queried.
pub struct RewardModel<'a> {
    pub spec: RewardSpec,
    d: Option<&'a Discriminator>,
    se: Option<&'a SemanticEvaluator>,
    df: &'a DocFreqTable,
    vocab: &'a Vocabulary,
    d_queries: Cell<u64>,
    se_queries: Cell<u64>,
}

impl<'a> RewardModel<'a> {
    pub fn new(
        spec: RewardSpec,
        d: Option<&'a Discriminator>,
        se: Option<&'a SemanticEvaluator>,
        df: &'a DocFreqTable,
        vocab: &'a Vocabulary,
    ) -> Result<Self> {
        if spec.use_n && d.is_none() {
            return Err(Error::Config("reward uses the discriminator but none was given".into()));
        }
        if spec.use_s && se.is_none() {
            return Err(Error::Config("reward uses the semantic evaluator but none was given".into()));
        }
        Ok(Self {
            spec,
            d: if spec.use_n { d } else { None },
            se: if spec.use_s { se } else { None },
            df,
            vocab,
            d_queries: Cell::new(0),
            se_queries: Cell::new(0),
        })
    }

    pub fn d_queries(&self) -> u64 {
        self.d_queries.get()
    }

    pub fn se_queries(&self) -> u64 {
        self.se_queries.get()
    }

    /// Rewards for complete captions (content tokens) of the given clips.
    pub fn score(&self, captions: &[Vec<TokenId>], clips: &[&ClipRecord]) -> Result<Vec<RewardBreakdown>> {
        if captions.len() != clips.len() {
            return Err(Error::Contract("one clip per caption is required".into()));
        }
        if captions.is_empty() {
            return Ok(Vec::new());
        }
        let inputs: Vec<Vec<TokenId>> = captions.iter().map(|c| caption_input(c)).collect();
        let n = match self.d {
            Some(d) => {
                self.d_queries.set(self.d_queries.get() + captions.len() as u64);
                d.probabilities(&inputs)?
            }
            None => vec![0.0; captions.len()],
        };
        let s = match self.se {
            Some(se) => {
                self.se_queries.set(self.se_queries.get() + captions.len() as u64);
                let feats: Vec<&Tensor> = clips.iter().map(|c| c.features()).collect();
                se.scores(&feats, &inputs)?
            }
            None => vec![0.0; captions.len()],
        };
        let mut out = Vec::with_capacity(captions.len());
        for (i, cap) in captions.iter().enumerate() {
            let words = self.vocab.decode(cap)?;
            let mut c = cider(&words, clips[i].references(), self.df)?;
            if self.spec.normalize_cider {
                c /= 10.0;
            }
            out.push(RewardBreakdown::new(n[i], s[i], c, self.spec.lambda));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixing_formula() {
        let r = RewardBreakdown::new(0.8, 0.6, 0.4, 0.5);
        assert!((r.total - 0.9).abs() < 1e-15);
        assert!(r.is_consistent());
        assert_eq!(RewardBreakdown::new(0.3, 0.2, 4.0, 0.0).total, 4.0);
        assert_eq!(RewardBreakdown::new(0.3, 0.2, 4.0, 1.0).total, 0.5);
    }

    #[test]
    fn ablations_pick_terms() {
        let mut c = TrainConfig::default();
        let s = RewardSpec::from_config(&c);
        assert!(s.use_n && s.use_s && s.lambda == 0.5);
        c.lambda = 0.0;
        let s = RewardSpec::from_config(&c);
        assert!(!s.use_n && !s.use_s);
        c.ablation = Ablation::Nd;
        let s = RewardSpec::from_config(&c);
        assert!(s.use_n && !s.use_s && s.lambda == 1.0);
        c.ablation = Ablation::Se;
        let s = RewardSpec::from_config(&c);
        assert!(!s.use_n && s.use_s && s.lambda == 1.0);
        c.ablation = Ablation::Le;
        assert_eq!(RewardSpec::from_config(&c).lambda, 0.0);
    }
}
