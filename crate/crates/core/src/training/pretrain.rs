use std::path::Path;

use super::log::{EpochRecord, Stage, TrainLog};
use super::{finite_loss, save_model, TrainConfig};
use crate::corpus::{make_batches, ClipRecord, DatasetSplit};
use crate::decoding::{sample_decode, GeneratorStepper};
use crate::error::Result;
use crate::models::{accuracy, caption_input, Discriminator, Generator, SemanticEvaluator};
use crate::rng::{self, Rng};
use crate::tensor::{Adam, Tape, Tensor};
use crate::text::{TokenId, Vocabulary};

pub const D_FINAL: &str = "discriminator.ckpt";
pub const D_LAST: &str = "discriminator_last.ckpt";
pub const D_LOG: &str = "discriminator_log.jsonl";
pub const SE_FINAL: &str = "semantic.ckpt";
pub const SE_LAST: &str = "semantic_last.ckpt";
pub const SE_LOG: &str = "semantic_log.jsonl";

/// One sampled caption (content tokens) per clip, each with its own noise.
pub fn sample_fakes(
    generator: &Generator,
    clips: &[&ClipRecord],
    max_len: usize,
    temperature: f64,
    rng: &mut Rng,
) -> Result<Vec<Vec<TokenId>>> {
    let mut out = Vec::with_capacity(clips.len());
    for clip in clips {
        let z = generator.sample_noise(rng);
        let stepper = GeneratorStepper::new(generator, clip.features(), &z)?.with_max_len(max_len);
        out.push(sample_decode(&stepper, temperature, rng)?.tokens);
    }
    Ok(out)
}

/// One binary cross-entropy step on paired real and fake captions, both in
/// discriminator input form. Returns the loss.
pub fn discriminator_step(
    d: &mut Discriminator,
    adam: &mut Adam,
    real: &[Vec<TokenId>],
    fake: &[Vec<TokenId>],
) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = d.loss(&mut tape, real, fake)?;
    let value = finite_loss(&tape, loss, "discriminator")?;
    tape.backward_into(loss, d.params_mut())?;
    adam.step(d.params_mut());
    Ok(value)
}

fn reference_inputs(clip: &ClipRecord, vocab: &Vocabulary, max_len: usize) -> Vec<Vec<TokenId>> {
    clip.references()
        .iter()
        .map(|r| {
            let mut ids = vocab.encode_content(r);
            ids.truncate(max_len);
            caption_input(&ids)
        })
        .collect()
}

/// Held-out accuracy at threshold 0.5: every reference of every clip is a
/// real example, and as many generator samples are the fakes.
pub fn discriminator_accuracy(
    d: &Discriminator,
    generator: &Generator,
    split: &DatasetSplit,
    vocab: &Vocabulary,
    max_len: usize,
    temperature: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let mut real = Vec::new();
    let mut clips = Vec::new();
    for rec in split.records() {
        for r in reference_inputs(rec, vocab, max_len) {
            real.push(r);
            clips.push(rec);
        }
    }
    let fake: Vec<Vec<TokenId>> = sample_fakes(generator, &clips, max_len, temperature, rng)?
        .iter()
        .map(|c| caption_input(c))
        .collect();
    Ok(accuracy(&d.probabilities(&real)?, &d.probabilities(&fake)?))
}

/// Trains the discriminator on references against fresh generator samples.
/// The generator is not modified.
#[allow(clippy::too_many_arguments)]
pub fn discriminator_pretrain(
    d: &mut Discriminator,
    generator: &Generator,
    train: &DatasetSplit,
    eval: Option<&DatasetSplit>,
    vocab: &Vocabulary,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainLog> {
    config.validate()?;
    let mut adam = Adam::new(config.learning_rate);
    let mut log = TrainLog::default();
    let seed = config.stage_seed("discriminator");
    for epoch in 1..=config.d_pretrain_epochs {
        let batches = make_batches(train, vocab, config.batch_size, config.max_len, seed, epoch as u64, true)?;
        let mut record = EpochRecord::new(Stage::Discriminator, epoch);
        let mut total = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let clips: Vec<&ClipRecord> = batch.clip_indices.iter().map(|&i| train.get(i)).collect();
            let real: Vec<Vec<TokenId>> = (0..batch.size()).map(|i| caption_input(batch.tokens_of(i))).collect();
            let mut r = rng::stream2(config.seed, "d-fakes", epoch as u64, bi as u64);
            let fake: Vec<Vec<TokenId>> = sample_fakes(generator, &clips, config.max_len, config.temperature, &mut r)?
                .iter()
                .map(|c| caption_input(c))
                .collect();
            total += discriminator_step(d, &mut adam, &real, &fake)?;
            record.steps += 1;
        }
        record.loss = total / record.steps.max(1) as f64;
        record.d_loss = Some(record.loss);
        if let Some(eval) = eval {
            let mut r = rng::stream(config.seed, "d-accuracy", epoch as u64);
            record.d_accuracy = Some(discriminator_accuracy(
                d,
                generator,
                eval,
                vocab,
                config.max_len,
                config.temperature,
                &mut r,
            )?);
        }
        save_model(out_dir, D_LAST, d, config, epoch, Some(&adam))?;
        log.push(record)?;
        if let Some(dir) = out_dir {
            log.write_jsonl(&dir.join(D_LOG))?;
        }
    }
    save_model(out_dir, D_FINAL, d, config, config.d_pretrain_epochs, None)?;
    Ok(log)
}

/// Mean paired cosine (each clip with its first reference) minus the mean
/// cosine over every mismatched clip and reference pair.
pub fn semantic_gap(se: &SemanticEvaluator, split: &DatasetSplit, vocab: &Vocabulary, max_len: usize) -> Result<f64> {
    let n = split.len();
    if n < 2 {
        return Err(crate::error::Error::Degenerate("semantic gap needs at least two clips".into()));
    }
    let feats: Vec<&Tensor> = split.records().iter().map(ClipRecord::features).collect();
    let caps: Vec<Vec<TokenId>> = split
        .records()
        .iter()
        .map(|r| reference_inputs(r, vocab, max_len).swap_remove(0))
        .collect();
    let mut tape = Tape::inference();
    let a = se.audio_embed(&mut tape, &feats)?;
    let c = se.caption_embed(&mut tape, &caps)?;
    let (a, c) = (tape.value(a), tape.value(c));
    let (mut paired, mut unpaired) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let s = crate::models::cosine_of_unit(a.row_slice(i), c.row_slice(j));
            if i == j {
                paired += s;
            } else {
                unpaired += s;
            }
        }
    }
    Ok(paired / n as f64 - unpaired / (n * (n - 1)) as f64)
}

/// Trains the semantic evaluator with the ranking loss. Batches with a
/// single clip carry no negatives and are skipped.
pub fn semantic_pretrain(
    se: &mut SemanticEvaluator,
    train: &DatasetSplit,
    eval: Option<&DatasetSplit>,
    vocab: &Vocabulary,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainLog> {
    config.validate()?;
    let mut adam = Adam::new(config.learning_rate);
    let mut log = TrainLog::default();
    let seed = config.stage_seed("semantic");
    for epoch in 1..=config.se_pretrain_epochs {
        let batches = make_batches(train, vocab, config.batch_size, config.max_len, seed, epoch as u64, true)?;
        let mut record = EpochRecord::new(Stage::Semantic, epoch);
        let mut total = 0.0;
        for batch in &batches {
            if batch.size() < 2 {
                record.skipped_steps += 1;
                continue;
            }
            let feats: Vec<&Tensor> = batch.clip_indices.iter().map(|&i| train.get(i).features()).collect();
            let caps: Vec<Vec<TokenId>> = (0..batch.size()).map(|i| caption_input(batch.tokens_of(i))).collect();
            let mut tape = Tape::new();
            let loss = se.ranking_loss(&mut tape, &feats, &caps)?;
            total += finite_loss(&tape, loss, "semantic evaluator")?;
            tape.backward_into(loss, se.params_mut())?;
            adam.step(se.params_mut());
            record.steps += 1;
        }
        record.loss = total / record.steps.max(1) as f64;
        if let Some(eval) = eval.filter(|e| e.len() >= 2) {
            record.se_gap = Some(semantic_gap(se, eval, vocab, config.max_len)?);
        }
        save_model(out_dir, SE_LAST, se, config, epoch, Some(&adam))?;
        log.push(record)?;
        if let Some(dir) = out_dir {
            log.write_jsonl(&dir.join(SE_LOG))?;
        }
    }
    save_model(out_dir, SE_FINAL, se, config, config.se_pretrain_epochs, None)?;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::fixtures::tiny;

    #[test]
    fn fakes_are_reproducible() {
        let t = tiny(1, 10);
        let clips: Vec<&ClipRecord> = t.corpus.train.records().iter().collect();
        let a = sample_fakes(&t.generator, &clips, 8, 1.0, &mut rng::stream(1, "x", 0)).unwrap();
        let b = sample_fakes(&t.generator, &clips, 8, 1.0, &mut rng::stream(1, "x", 0)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|c| c.len() <= 8));
    }

    #[test]
    fn discriminator_learns_to_separate() {
        let t = tiny(4, 24);
        let mut d = t.discriminator.clone();
        let mut config = t.config.clone();
        config.d_pretrain_epochs = 6;
        let log = discriminator_pretrain(&mut d, &t.generator, &t.corpus.train, Some(&t.corpus.eval), &t.vocab, &config, None)
            .unwrap();
        let acc = log.last().unwrap().d_accuracy.unwrap();
        assert!(acc > 0.75, "accuracy {acc}");
        assert!(log.last().unwrap().loss < log.records[0].loss);
    }

    #[test]
    fn semantic_pretraining_lowers_the_loss() {
        let t = tiny(6, 24);
        let mut se = t.semantic.clone();
        let mut config = t.config.clone();
        config.se_pretrain_epochs = 5;
        let log = semantic_pretrain(&mut se, &t.corpus.train, Some(&t.corpus.eval), &t.vocab, &config, None).unwrap();
        assert!(log.last().unwrap().loss < log.records[0].loss);
        assert!(log.last().unwrap().se_gap.is_some());
    }
}
