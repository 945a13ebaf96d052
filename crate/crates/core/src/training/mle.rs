use std::collections::BTreeMap;
use std::path::Path;

use super::log::{EpochRecord, Stage, TrainLog};
use super::{finite_loss, save_model, TrainConfig};
use crate::corpus::{make_batches, Batch, DatasetSplit};
use crate::decoding::{greedy_decode, GeneratorStepper};
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::models::{load_checkpoint, Generator};
use crate::rng::{self, Rng};
use crate::tensor::{Adam, Tape, Tensor};
use crate::text::Vocabulary;

/// One teacher-forced cross-entropy step with zero noise. Returns the loss.
pub fn mle_step(
    generator: &mut Generator,
    adam: &mut Adam,
    split: &DatasetSplit,
    batch: &Batch,
    dropout_rng: Option<&mut Rng>,
) -> Result<f64> {
    let longest = batch.target_lengths.iter().copied().max().unwrap_or(0);
    if longest < 2 {
        return Err(Error::Contract("batch targets must hold at least <sos> and <eos>".into()));
    }
    let steps = longest - 1;
    let width = batch.target_width;
    let b = batch.size();
    let mut inputs = Vec::with_capacity(b * steps);
    let mut targets = Vec::with_capacity(b * steps);
    let mut mask = Vec::with_capacity(b * steps);
    for i in 0..b {
        let row = &batch.targets[i * width..(i + 1) * width];
        inputs.extend_from_slice(&row[..steps]);
        targets.extend_from_slice(&row[1..=steps]);
        mask.extend((0..steps).map(|j| j + 1 < batch.target_lengths[i]));
    }
    let feats: Vec<&Tensor> = batch.clip_indices.iter().map(|&i| split.get(i).features()).collect();
    let zero = generator.zero_noise();
    let noise: Vec<&[f64]> = vec![zero.as_slice(); b];
    let mut tape = Tape::new();
    let logits = generator.forward(&mut tape, &feats, &noise, &inputs, steps, dropout_rng)?;
    let loss = tape.cross_entropy(logits, &targets, &mask)?;
    let value = finite_loss(&tape, loss, "MLE")?;
    tape.backward_into(loss, generator.params_mut())?;
    adam.step(generator.params_mut());
    Ok(value)
}

/// Greedy top-1 captions at zero noise, scored by corpus CIDEr and BLEU_4.
pub fn greedy_eval(generator: &Generator, split: &DatasetSplit, vocab: &Vocabulary, max_len: usize) -> Result<(f64, f64)> {
    let zero = generator.zero_noise();
    let mut generated = BTreeMap::new();
    let mut references = BTreeMap::new();
    for rec in split.records() {
        let stepper = GeneratorStepper::new(generator, rec.features(), &zero)?.with_max_len(max_len);
        let d = greedy_decode(&stepper)?;
        generated.insert(rec.clip_id().to_owned(), vec![vocab.decode(&d.tokens)?]);
        references.insert(rec.clip_id().to_owned(), rec.references().to_vec());
    }
    let report = evaluate(&generated, &references)?;
    Ok((report.cider, report.bleu_4))
}

pub const MLE_LAST: &str = "generator_last.ckpt";
pub const MLE_BEST: &str = "generator_best.ckpt";
pub const MLE_FINAL: &str = "generator_final.ckpt";
pub const MLE_LOG: &str = "mle_log.jsonl";

/// Maximum-likelihood pretraining.
///
/// With an output directory, every epoch rewrites `generator_last.ckpt`
/// (with optimizer state, for resuming), the best epoch by evaluation CIDEr
/// is kept as `generator_best.ckpt`, and the finished model goes to
/// `generator_final.ckpt`. `resume` continues from `generator_last.ckpt`.
pub fn mle_pretrain(
    generator: &mut Generator,
    train: &DatasetSplit,
    eval: Option<&DatasetSplit>,
    vocab: &Vocabulary,
    config: &TrainConfig,
    out_dir: Option<&Path>,
    resume: bool,
) -> Result<TrainLog> {
    config.validate()?;
    if config.max_len > generator.config().max_len {
        return Err(Error::Config(format!(
            "training max_len {} exceeds the generator's {}",
            config.max_len,
            generator.config().max_len
        )));
    }
    let mut adam = Adam::new(config.learning_rate);
    let mut log = TrainLog::default();
    let mut start = 1;
    let mut best = f64::NEG_INFINITY;
    if let (true, Some(dir)) = (resume, out_dir) {
        let last = dir.join(MLE_LAST);
        if last.exists() {
            let ck = load_checkpoint::<Generator>(&last)?;
            *generator = ck.model;
            if let Some(state) = ck.optimizer {
                adam = Adam::with_state(config.learning_rate, state);
            }
            start = ck.meta.epoch + 1;
            let log_path = dir.join(MLE_LOG);
            if log_path.exists() {
                for r in TrainLog::read_jsonl(&log_path)?.records {
                    if r.epoch <= ck.meta.epoch {
                        best = best.max(r.eval_cider.unwrap_or(f64::NEG_INFINITY));
                        log.push(r)?;
                    }
                }
            }
        }
    }
    let seed = config.stage_seed("mle");
    for epoch in start..=config.mle_epochs {
        let batches = make_batches(train, vocab, config.batch_size, config.max_len, seed, epoch as u64, true)?;
        let mut record = EpochRecord::new(Stage::Mle, epoch);
        let mut total = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let mut r = rng::stream2(config.seed, "dropout", epoch as u64, bi as u64);
            total += mle_step(generator, &mut adam, train, batch, Some(&mut r))?;
            record.steps += 1;
        }
        record.loss = total / record.steps.max(1) as f64;
        if let Some(eval) = eval {
            let (c, b4) = greedy_eval(generator, eval, vocab, config.max_len)?;
            record.eval_cider = Some(c);
            record.eval_bleu_4 = Some(b4);
            if c > best {
                best = c;
                save_model(out_dir, MLE_BEST, generator, config, epoch, None)?;
            }
        }
        save_model(out_dir, MLE_LAST, generator, config, epoch, Some(&adam))?;
        log.push(record)?;
        if let Some(dir) = out_dir {
            log.write_jsonl(&dir.join(MLE_LOG))?;
        }
    }
    save_model(out_dir, MLE_FINAL, generator, config, config.mle_epochs, None)?;
    if let Some(dir) = out_dir {
        log.write_jsonl(&dir.join(MLE_LOG))?;
    }
    Ok(log)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ClipRecord, SplitName};
    use crate::models::GeneratorConfig;
    use crate::training::fixtures::tiny;

    #[test]
    fn memorises_a_single_caption() {
        let caption: Vec<String> = "a dog barks near the door".split(' ').map(str::to_owned).collect();
        let vocab = Vocabulary::build(std::slice::from_ref(&caption), 1).unwrap();
        let feats = Tensor::matrix(3, 2, vec![0.1, -0.2, 0.3, 0.0, -0.1, 0.2]).unwrap();
        let clip = ClipRecord::new("only", feats, vec![caption.clone(); 5]).unwrap();
        let split = DatasetSplit::new(SplitName::Train, vec![clip]).unwrap();
        let mut gc = GeneratorConfig::new(vocab.len(), 2);
        gc.d_model = 16;
        gc.heads = 2;
        gc.ff_dim = 32;
        gc.layers = 1;
        gc.noise_dim = 2;
        gc.dropout = 0.0;
        gc.max_len = 8;
        let mut g = Generator::new(gc, 3).unwrap();
        let mut adam = Adam::new(1e-2);
        let mut loss = f64::INFINITY;
        for step in 0..200 {
            let batch = make_batches(&split, &vocab, 1, 8, 0, step, false).unwrap().remove(0);
            loss = mle_step(&mut g, &mut adam, &split, &batch, None).unwrap();
        }
        assert!(loss < 0.1, "final loss {loss}");
        let (_, b4) = greedy_eval(&g, &split, &vocab, 8).unwrap();
        assert!(b4 > 0.99, "bleu {b4}");
    }

    #[test]
    fn resume_matches_an_uninterrupted_run() {
        let t = tiny(5, 16);
        let dir = tempfile::tempdir().unwrap();
        let mut straight = t.generator.clone();
        mle_pretrain(&mut straight, &t.corpus.train, Some(&t.corpus.eval), &t.vocab, &t.config, None, false).unwrap();

        let mut first = t.config.clone();
        first.mle_epochs = 1;
        let mut g = t.generator.clone();
        mle_pretrain(&mut g, &t.corpus.train, Some(&t.corpus.eval), &t.vocab, &first, Some(dir.path()), false).unwrap();
        let mut resumed = t.generator.clone();
        let log = mle_pretrain(
            &mut resumed,
            &t.corpus.train,
            Some(&t.corpus.eval),
            &t.vocab,
            &t.config,
            Some(dir.path()),
            true,
        )
        .unwrap();
        assert_eq!(log.records.len(), 2);
        assert!(resumed.params().same_values(straight.params()));
        for f in [MLE_LAST, MLE_BEST, MLE_FINAL, MLE_LOG] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
    }

    #[test]
    fn training_lowers_the_loss() {
        let t = tiny(2, 16);
        let mut g = t.generator.clone();
        let mut config = t.config.clone();
        config.mle_epochs = 6;
        let log = mle_pretrain(&mut g, &t.corpus.train, None, &t.vocab, &config, None, false).unwrap();
        let first = log.records[0].loss;
        let last = log.last().unwrap().loss;
        assert!(last < first, "{first} -> {last}");
        assert!(!g.params().same_values(t.generator.params()));
    }
}
