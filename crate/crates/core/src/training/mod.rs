//! MLE pretraining, discriminator and semantic-evaluator pretraining, and
//! adversarial training with self-critical policy gradients.

mod adversarial;
mod log;
mod mle;
mod pretrain;
mod reward;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{config_hash, save_checkpoint, CheckpointMeta, Model};
use crate::rng;
use crate::tensor::{Adam, Tape, Var};

pub use adversarial::{
    adversarial_train, rollouts, scst_generator_step, scst_surrogate, AdversarialModels, AdversarialOutcome, Rollout, ScstStep,
};
pub use log::{EpochRecord, RewardLogEntry, RewardSummary, Stage, TrainLog};
pub use mle::{greedy_eval, mle_pretrain, mle_step};
pub use pretrain::{
    discriminator_accuracy, discriminator_pretrain, discriminator_step, sample_fakes, semantic_gap, semantic_pretrain,
};
pub use reward::{RewardBreakdown, RewardModel, RewardSpec};

/// File names the training stages write into a run directory.
pub mod files {
    pub use super::adversarial::{GAN_D, GAN_D_LAST, GAN_G, GAN_G_LAST, GAN_LOG, REWARD_CSV, REWARD_LOG};
    pub use super::mle::{MLE_BEST, MLE_FINAL, MLE_LAST, MLE_LOG};
    pub use super::pretrain::{D_FINAL, D_LAST, D_LOG, SE_FINAL, SE_LAST, SE_LOG};
}

/// Which reward terms an adversarial run uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// The mixed reward with the configured λ.
    #[default]
    None,
    /// Discriminator only: λ = 1 with `s` forced to 0.
    Nd,
    /// Semantic evaluator only: λ = 1 with `n` forced to 0.
    Se,
    /// Language evaluator only: λ = 0.
    Le,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub mle_epochs: u32,
    pub d_pretrain_epochs: u32,
    pub se_pretrain_epochs: u32,
    pub adversarial_epochs: u32,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate of both networks in the adversarial stage; falls back
    /// to `learning_rate`.
    pub adversarial_learning_rate: Option<f64>,
    pub seed: u64,
    /// Longest caption content used for training targets and rollouts.
    pub max_len: usize,
    /// Divide the CIDEr term by 10 before mixing.
    pub normalize_cider: bool,
    pub ablation: Ablation,
    /// Sampling temperature for policy-gradient rollouts and fake captions.
    pub temperature: f64,
    /// Adversarial epochs between evaluation snapshots; 0 disables them.
    pub eval_every: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            mle_epochs: 25,
            d_pretrain_epochs: 5,
            se_pretrain_epochs: 25,
            adversarial_epochs: 30,
            batch_size: 32,
            learning_rate: 1e-4,
            adversarial_learning_rate: None,
            seed: 0,
            max_len: crate::text::DEFAULT_MAX_LEN,
            normalize_cider: false,
            ablation: Ablation::None,
            temperature: 1.0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0,1], got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if let Some(lr) = self.adversarial_learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("adversarial_learning_rate must be positive, got {lr}")));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        Ok(())
    }

    pub fn adversarial_lr(&self) -> f64 {
        self.adversarial_learning_rate.unwrap_or(self.learning_rate)
    }

    pub fn hash(&self) -> u64 {
        config_hash(&serde_json::to_string(self).expect("config serialises"))
    }

    /// Seed for one stage's data order, independent of the other stages.
    pub(crate) fn stage_seed(&self, stage: &str) -> u64 {
        use rand::RngCore as _;
        rng::stream(self.seed, stage, 0).next_u64()
    }

    pub(crate) fn meta(&self, epoch: u32) -> CheckpointMeta {
        CheckpointMeta {
            epoch,
            seed: self.seed,
            config_hash: self.hash(),
        }
    }
}

pub(crate) fn finite_loss(tape: &Tape, loss: Var, what: &str) -> Result<f64> {
    let v = tape.scalar(loss)?;
    if !v.is_finite() {
        return Err(Error::Diverged(format!("{what} loss became {v}")));
    }
    Ok(v)
}

pub(crate) fn save_model<M: Model>(dir: Option<&Path>, name: &str, model: &M, config: &TrainConfig, epoch: u32, adam: Option<&Adam>) -> Result<()> {
    if let Some(dir) = dir {
        save_checkpoint(&dir.join(name), model, &config.meta(epoch), adam.map(Adam::state))?;
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::TrainConfig;
    use crate::corpus::{generate_synthetic_corpus, SyntheticConfig, SyntheticCorpus};
    use crate::models::{
        DiscriminatorConfig, Discriminator, Generator, GeneratorConfig, SemanticConfig, SemanticEvaluator,
    };
    use crate::text::Vocabulary;

    pub struct Tiny {
        pub corpus: SyntheticCorpus,
        pub vocab: Vocabulary,
        pub generator: Generator,
        pub discriminator: Discriminator,
        pub semantic: SemanticEvaluator,
        pub config: TrainConfig,
    }

    pub fn tiny(seed: u64, clips: usize) -> Tiny {
        let syn = SyntheticConfig {
            feat_dim: 6,
            min_frames: 4,
            max_frames: 7,
            noise_std: 0.5,
        };
        let corpus = generate_synthetic_corpus(&syn, seed, clips, 2).unwrap();
        let vocab = Vocabulary::build(&corpus.train.reference_token_lists(), 1).unwrap();
        let v = vocab.len();
        let mut gc = GeneratorConfig::new(v, 6);
        gc.d_model = 16;
        gc.heads = 2;
        gc.ff_dim = 24;
        gc.layers = 1;
        gc.noise_dim = 4;
        gc.max_len = 8;
        let mut dc = DiscriminatorConfig::new(v);
        dc.embed_dim = 12;
        dc.hidden = 16;
        let mut sc = SemanticConfig::new(v, 6);
        sc.conv_channels = 12;
        sc.word_dim = 12;
        sc.embed_dim = 16;
        let config = TrainConfig {
            mle_epochs: 2,
            d_pretrain_epochs: 2,
            se_pretrain_epochs: 2,
            adversarial_epochs: 2,
            batch_size: 4,
            learning_rate: 1e-3,
            seed,
            max_len: 8,
            ..TrainConfig::default()
        };
        Tiny {
            generator: Generator::new(gc, seed).unwrap(),
            discriminator: Discriminator::new(dc, seed).unwrap(),
            semantic: SemanticEvaluator::new(sc, seed).unwrap(),
            corpus,
            vocab,
            config,
        }
    }
}
