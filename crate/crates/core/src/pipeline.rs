//! End-to-end runs on the synthetic corpus: data, the three pretraining
//! stages, adversarial training, diverse generation and evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{generate_synthetic_corpus, DatasetSplit, SyntheticConfig, SyntheticCorpus};
use crate::decoding::{generate_diverse_set, write_captions, CaptionRecord, DecodeConfig, DiverseMode};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricReport};
use crate::models::{
    Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, SemanticConfig, SemanticEvaluator,
};
use crate::rng;
use crate::text::Vocabulary;
use crate::training::{
    adversarial_train, discriminator_accuracy, discriminator_pretrain, mle_pretrain, semantic_gap, semantic_pretrain,
    AdversarialModels, AdversarialOutcome, TrainConfig, TrainLog,
};

/// Network widths shared by the three models; vocabulary and feature sizes
/// come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSizes {
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub layers: usize,
    pub noise_dim: usize,
    pub dropout: f64,
    pub d_embed_dim: usize,
    pub d_hidden: usize,
    pub se_conv_channels: usize,
    pub se_word_dim: usize,
    pub se_embed_dim: usize,
    pub se_margin: f64,
}

impl Default for ModelSizes {
    fn default() -> Self {
        let g = GeneratorConfig::new(1, 1);
        let d = DiscriminatorConfig::new(1);
        let s = SemanticConfig::new(1, 1);
        Self {
            d_model: g.d_model,
            heads: g.heads,
            ff_dim: g.ff_dim,
            layers: g.layers,
            noise_dim: g.noise_dim,
            dropout: g.dropout,
            d_embed_dim: d.embed_dim,
            d_hidden: d.hidden,
            se_conv_channels: s.conv_channels,
            se_word_dim: s.word_dim,
            se_embed_dim: s.embed_dim,
            se_margin: s.margin,
        }
    }
}

impl ModelSizes {
    pub fn generator(&self, vocab_size: usize, feat_dim: usize, max_len: usize) -> GeneratorConfig {
        GeneratorConfig {
            d_model: self.d_model,
            heads: self.heads,
            ff_dim: self.ff_dim,
            layers: self.layers,
            noise_dim: self.noise_dim,
            dropout: self.dropout,
            max_len,
            ..GeneratorConfig::new(vocab_size, feat_dim)
        }
    }

    pub fn discriminator(&self, vocab_size: usize) -> DiscriminatorConfig {
        DiscriminatorConfig {
            embed_dim: self.d_embed_dim,
            hidden: self.d_hidden,
            ..DiscriminatorConfig::new(vocab_size)
        }
    }

    pub fn semantic(&self, vocab_size: usize, feat_dim: usize) -> SemanticConfig {
        SemanticConfig {
            conv_channels: self.se_conv_channels,
            word_dim: self.se_word_dim,
            embed_dim: self.se_embed_dim,
            margin: self.se_margin,
            ..SemanticConfig::new(vocab_size, feat_dim)
        }
    }
}

/// A complete synthetic-corpus run.
#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub n_clips: usize,
    pub n_classes: usize,
    pub synthetic: SyntheticConfig,
    pub sizes: ModelSizes,
    pub train: TrainConfig,
    pub beam_size: usize,
    pub n_captions: usize,
}

impl PipelineConfig {
    /// 60 clips in 4 classes with MLE 5, D 2, SE 5 and adversarial 5 epochs.
    ///
    /// With 48 training clips a batch of 32 gives two updates per epoch, so
    /// pretraining uses batches of 4 at a learning rate of 1e-3; the
    /// adversarial stage keeps 1e-4.
    pub fn smoke(seed: u64, lambda: f64) -> Self {
        Self {
            n_clips: 60,
            n_classes: 4,
            synthetic: SyntheticConfig::default(),
            sizes: ModelSizes::default(),
            train: TrainConfig {
                lambda,
                mle_epochs: 5,
                d_pretrain_epochs: 2,
                se_pretrain_epochs: 5,
                adversarial_epochs: 5,
                batch_size: 4,
                learning_rate: 1e-3,
                adversarial_learning_rate: Some(1e-4),
                seed,
                ..TrainConfig::default()
            },
            beam_size: 5,
            n_captions: 5,
        }
    }
}

pub struct PipelineOutcome {
    pub corpus: SyntheticCorpus,
    pub vocab: Vocabulary,
    pub mle_generator: Generator,
    pub models: AdversarialModels,
    pub log: TrainLog,
    /// Held-out accuracy of the pretrained discriminator against samples of
    /// the MLE generator.
    pub d_accuracy: f64,
    pub se_gap: f64,
    pub adversarial: AdversarialOutcome,
    pub mle_captions: Vec<CaptionRecord>,
    pub gan_captions: Vec<CaptionRecord>,
    pub mle_report: MetricReport,
    pub gan_report: MetricReport,
}

/// Diverse captions for every clip of a split.
pub fn generate_split(
    generator: &Generator,
    split: &DatasetSplit,
    vocab: &Vocabulary,
    mode: DiverseMode,
    settings: &DecodeConfig,
) -> Result<Vec<CaptionRecord>> {
    let mut out = Vec::with_capacity(split.len());
    for (i, rec) in split.records().iter().enumerate() {
        let set = generate_diverse_set(generator, rec.features(), mode, settings, i as u64)?;
        let mut captions = Vec::with_capacity(set.captions.len());
        let mut scores = Vec::with_capacity(set.captions.len());
        for d in &set.captions {
            captions.push(vocab.decode_to_string(&d.tokens)?);
            scores.push(d.score);
        }
        out.push(CaptionRecord {
            clip_id: rec.clip_id().to_owned(),
            captions,
            scores,
        });
    }
    Ok(out)
}

/// Scores caption records against a split's references.
pub fn evaluate_captions(captions: &[CaptionRecord], split: &DatasetSplit) -> Result<MetricReport> {
    let mut generated = BTreeMap::new();
    for c in captions {
        let words: Vec<Vec<String>> = c.captions.iter().map(|s| crate::metrics::words(s)).collect();
        if generated.insert(c.clip_id.clone(), words).is_some() {
            return Err(Error::clip(&c.clip_id, "clip appears twice in the caption file"));
        }
    }
    let references = split
        .records()
        .iter()
        .map(|r| (r.clip_id().to_owned(), r.references().to_vec()))
        .collect();
    evaluate(&generated, &references)
}

/// Runs every stage in order. With an output directory, checkpoints, logs,
/// captions and reports of each stage are written there.
pub fn run_pipeline(config: &PipelineConfig, out_dir: Option<&Path>) -> Result<PipelineOutcome> {
    let tc = &config.train;
    tc.validate()?;
    let corpus = generate_synthetic_corpus(&config.synthetic, tc.seed, config.n_clips, config.n_classes)?;
    let vocab = Vocabulary::build(&corpus.train.reference_token_lists(), 1)?;
    let feat = config.synthetic.feat_dim;
    let v = vocab.len();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        vocab.save(&dir.join("vocab.txt"))?;
    }

    let mut generator = Generator::new(config.sizes.generator(v, feat, tc.max_len), tc.seed)?;
    let mut discriminator = Discriminator::new(config.sizes.discriminator(v), tc.seed)?;
    let mut semantic = SemanticEvaluator::new(config.sizes.semantic(v, feat), tc.seed)?;

    let mut log = mle_pretrain(&mut generator, &corpus.train, Some(&corpus.eval), &vocab, tc, out_dir, false)?;
    log.extend(discriminator_pretrain(
        &mut discriminator,
        &generator,
        &corpus.train,
        Some(&corpus.eval),
        &vocab,
        tc,
        out_dir,
    )?)?;
    log.extend(semantic_pretrain(&mut semantic, &corpus.train, Some(&corpus.eval), &vocab, tc, out_dir)?)?;
    let d_accuracy = discriminator_accuracy(
        &discriminator,
        &generator,
        &corpus.eval,
        &vocab,
        tc.max_len,
        tc.temperature,
        &mut rng::stream(tc.seed, "pipeline-d-accuracy", 0),
    )?;
    let se_gap = semantic_gap(&semantic, &corpus.eval, &vocab, tc.max_len)?;

    let mle_generator = generator.clone();
    let mut models = AdversarialModels {
        generator,
        discriminator,
        semantic,
    };
    let adversarial = adversarial_train(&mut models, &corpus.train, Some(&corpus.eval), &vocab, tc, out_dir)?;
    log.extend(adversarial.log.clone())?;

    let settings = DecodeConfig {
        beam_size: config.beam_size,
        n_captions: config.n_captions,
        max_len: tc.max_len,
        seed: tc.seed,
        ..DecodeConfig::default()
    };
    let mle_captions = generate_split(&mle_generator, &corpus.eval, &vocab, DiverseMode::Mle, &settings)?;
    let gan_captions = generate_split(&models.generator, &corpus.eval, &vocab, DiverseMode::Gan, &settings)?;
    let mle_report = evaluate_captions(&mle_captions, &corpus.eval)?;
    let gan_report = evaluate_captions(&gan_captions, &corpus.eval)?;
    if let Some(dir) = out_dir {
        write_captions(&dir.join("captions_mle.jsonl"), &mle_captions)?;
        write_captions(&dir.join("captions_gan.jsonl"), &gan_captions)?;
        mle_report.write_json(&dir.join("report_mle.json"))?;
        gan_report.write_json(&dir.join("report_gan.json"))?;
    }
    Ok(PipelineOutcome {
        corpus,
        vocab,
        mle_generator,
        models,
        log,
        d_accuracy,
        se_gap,
        adversarial,
        mle_captions,
        gan_captions,
        mle_report,
        gan_report,
    })
}
