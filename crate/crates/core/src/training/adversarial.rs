use std::path::Path;

use super::log::{append_jsonl, EpochRecord, RewardLogEntry, RewardSummary, Stage, TrainLog};
use super::pretrain::{discriminator_accuracy, discriminator_step};
use super::reward::{RewardBreakdown, RewardModel, RewardSpec};
use super::{finite_loss, greedy_eval, save_model, TrainConfig};
use crate::corpus::{make_batches, ClipRecord, DatasetSplit};
use crate::decoding::{greedy_decode, sample_decode, Decoded, GeneratorStepper, Sampled};
use crate::error::{Error, Result};
use crate::metrics::DocFreqTable;
use crate::models::{caption_input, Discriminator, Generator, SemanticEvaluator};
use crate::rng::{self, Rng};
use crate::tensor::{Adam, Tape, Tensor, Var};
use crate::text::{TokenId, EOS, PAD, SOS};

pub const GAN_G: &str = "generator_gan.ckpt";
pub const GAN_D: &str = "discriminator_gan.ckpt";
pub const GAN_G_LAST: &str = "generator_gan_last.ckpt";
pub const GAN_D_LAST: &str = "discriminator_gan_last.ckpt";
pub const GAN_LOG: &str = "adversarial_log.jsonl";
pub const REWARD_LOG: &str = "rewards.jsonl";
pub const REWARD_CSV: &str = "rewards.csv";

/// The three networks of the adversarial stage. The semantic evaluator is
/// only read.
#[derive(Clone, Debug)]
pub struct AdversarialModels {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub semantic: SemanticEvaluator,
}

#[derive(Clone, Debug, Default)]
pub struct AdversarialOutcome {
    pub log: TrainLog,
    /// Every reward computed, sampled and greedy captions alike.
    pub rewards: Vec<RewardLogEntry>,
    pub d_queries: u64,
    pub se_queries: u64,
    pub d_steps: u64,
    pub g_steps: u64,
}

/// A sampled caption and the greedy baseline, both decoded with noise `z`.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub z: Vec<f64>,
    pub sample: Sampled,
    pub greedy: Decoded,
}

/// Draws one noise vector per clip, then a sampled and a greedy caption.
pub fn rollouts(
    generator: &Generator,
    clips: &[&ClipRecord],
    max_len: usize,
    temperature: f64,
    rng: &mut Rng,
) -> Result<Vec<Rollout>> {
    let mut out = Vec::with_capacity(clips.len());
    for clip in clips {
        let z = generator.sample_noise(rng);
        let stepper = GeneratorStepper::new(generator, clip.features(), &z)?.with_max_len(max_len);
        let sample = sample_decode(&stepper, temperature, rng)?;
        let greedy = greedy_decode(&stepper)?;
        out.push(Rollout { z, sample, greedy });
    }
    Ok(out)
}

/// `−(1/B) Σ_t a_{owner(t)} log p_t`, whose gradient is the self-critical
/// policy gradient. `token_log_probs` holds one entry per sampled token and
/// `owners[t]` names the sequence that token belongs to.
pub fn scst_surrogate(tape: &mut Tape, token_log_probs: Var, owners: &[usize], advantages: &[f64]) -> Result<Var> {
    let shape = tape.value(token_log_probs).shape().to_vec();
    let n: usize = shape.iter().product();
    if owners.len() != n || advantages.is_empty() {
        return Err(Error::shape("scst surrogate: one owner per token log-probability is required"));
    }
    let b = advantages.len() as f64;
    let mut w = Vec::with_capacity(n);
    for &o in owners {
        let a = *advantages
            .get(o)
            .ok_or_else(|| Error::shape(format!("scst surrogate: owner {o} out of range")))?;
        w.push(-a / b);
    }
    let w = tape.constant(Tensor::new(&shape, w)?);
    let weighted = tape.mul(token_log_probs, w)?;
    Ok(tape.sum(weighted))
}

/// Result of one generator update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScstStep {
    pub loss: f64,
    /// False when every advantage was zero and the optimizer was not run.
    pub stepped: bool,
}

/// Self-critical update from rollouts and their advantages
/// `r(sample) − r(greedy)`. Log-probabilities of the sampled tokens are
/// recomputed on the tape by teacher forcing without dropout; an `<eos>`
/// forced by the length limit is not a policy choice and is left out.
pub fn scst_generator_step(
    generator: &mut Generator,
    adam: &mut Adam,
    clips: &[&ClipRecord],
    rollouts: &[Rollout],
    advantages: &[f64],
    temperature: f64,
) -> Result<ScstStep> {
    let b = rollouts.len();
    if clips.len() != b || advantages.len() != b || b == 0 {
        return Err(Error::Contract("one clip and one advantage per rollout are required".into()));
    }
    if advantages.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite("advantage".into()));
    }
    if advantages.iter().all(|&a| a == 0.0) {
        return Ok(ScstStep {
            loss: 0.0,
            stepped: false,
        });
    }
    let vocab = generator.config().vocab_size;
    let steps = rollouts.iter().map(|r| r.sample.tokens.len() + 1).max().unwrap_or(1);
    let mut inputs = vec![PAD; b * steps];
    let mut idx = Vec::new();
    let mut owners = Vec::new();
    for (i, r) in rollouts.iter().enumerate() {
        let toks = &r.sample.tokens;
        inputs[i * steps] = SOS;
        inputs[i * steps + 1..i * steps + 1 + toks.len()].copy_from_slice(toks);
        for t in 0..=toks.len() {
            if t == toks.len() && !r.sample.finished {
                continue;
            }
            let target: TokenId = toks.get(t).copied().unwrap_or(EOS);
            idx.push((i * steps + t) * vocab + target);
            owners.push(i);
        }
    }
    let feats: Vec<&Tensor> = clips.iter().map(|c| c.features()).collect();
    let noise: Vec<&[f64]> = rollouts.iter().map(|r| r.z.as_slice()).collect();
    let mut tape = Tape::new();
    let mut logits = generator.forward(&mut tape, &feats, &noise, &inputs, steps, None)?;
    if temperature != 1.0 {
        logits = tape.scale(logits, 1.0 / temperature);
    }
    let lp = tape.log_softmax(logits, 1)?;
    let picked = tape.take(lp, &idx, &[idx.len(), 1])?;
    let loss = scst_surrogate(&mut tape, picked, &owners, advantages)?;
    let value = finite_loss(&tape, loss, "policy-gradient")?;
    tape.backward_into(loss, generator.params_mut())?;
    adam.step(generator.params_mut());
    Ok(ScstStep {
        loss: value,
        stepped: true,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Adversarial training. Each batch draws rollouts from the current
/// generator, takes one discriminator step on references against the sampled
/// captions, then scores both rollouts with the updated discriminator and
/// takes one self-critical generator step.
///
/// Networks whose reward term is unused are neither trained nor queried.
pub fn adversarial_train(
    models: &mut AdversarialModels,
    train: &DatasetSplit,
    eval: Option<&DatasetSplit>,
    vocab: &crate::text::Vocabulary,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<AdversarialOutcome> {
    config.validate()?;
    let spec = RewardSpec::from_config(config);
    let df = DocFreqTable::build(&train.records().iter().map(|r| r.references().to_vec()).collect::<Vec<_>>())?;
    let mut g_adam = Adam::new(config.adversarial_lr());
    let mut d_adam = Adam::new(config.adversarial_lr());
    let mut outcome = AdversarialOutcome::default();
    let seed = config.stage_seed("adversarial");
    if let Some(dir) = out_dir {
        let p = dir.join(REWARD_LOG);
        if p.exists() {
            std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    for epoch in 1..=config.adversarial_epochs {
        let batches = make_batches(train, vocab, config.batch_size, config.max_len, seed, epoch as u64, true)?;
        let mut record = EpochRecord::new(Stage::Adversarial, epoch);
        let mut epoch_rewards: Vec<RewardLogEntry> = Vec::new();
        let (mut losses, mut d_losses) = (Vec::new(), Vec::new());
        let (mut sampled, mut baseline): (Vec<RewardBreakdown>, Vec<f64>) = (Vec::new(), Vec::new());
        for (bi, batch) in batches.iter().enumerate() {
            let clips: Vec<&ClipRecord> = batch.clip_indices.iter().map(|&i| train.get(i)).collect();
            let mut r = rng::stream2(config.seed, "rollouts", epoch as u64, bi as u64);
            let rolls = rollouts(&models.generator, &clips, config.max_len, config.temperature, &mut r)?;

            if spec.use_n {
                let real: Vec<Vec<TokenId>> = (0..batch.size()).map(|i| caption_input(batch.tokens_of(i))).collect();
                let fake: Vec<Vec<TokenId>> = rolls.iter().map(|r| caption_input(&r.sample.tokens)).collect();
                d_losses.push(discriminator_step(&mut models.discriminator, &mut d_adam, &real, &fake)?);
                outcome.d_steps += 1;
            }

            let rm = RewardModel::new(spec, Some(&models.discriminator), Some(&models.semantic), &df, vocab)?;
            let samples: Vec<Vec<TokenId>> = rolls.iter().map(|r| r.sample.tokens.clone()).collect();
            let greedy: Vec<Vec<TokenId>> = rolls.iter().map(|r| r.greedy.tokens.clone()).collect();
            let rs = rm.score(&samples, &clips)?;
            let rg = rm.score(&greedy, &clips)?;
            record.d_queries += rm.d_queries();
            record.se_queries += rm.se_queries();

            let adv: Vec<f64> = rs.iter().zip(&rg).map(|(s, g)| s.total - g.total).collect();
            let step = scst_generator_step(&mut models.generator, &mut g_adam, &clips, &rolls, &adv, config.temperature)?;
            record.steps += 1;
            if step.stepped {
                outcome.g_steps += 1;
            } else {
                record.skipped_steps += 1;
            }
            losses.push(step.loss);

            let global = record.steps + (epoch as u64 - 1) * batches.len() as u64;
            for (i, clip) in clips.iter().enumerate() {
                for (role, rw) in [("sample", rs[i]), ("greedy", rg[i])] {
                    epoch_rewards.push(RewardLogEntry {
                        epoch,
                        step: global,
                        clip_id: clip.clip_id().to_owned(),
                        role: role.into(),
                        reward: rw,
                    });
                }
            }
            sampled.extend(rs);
            baseline.extend(rg.iter().map(|r| r.total));
        }
        record.loss = mean(losses.into_iter());
        if !d_losses.is_empty() {
            record.d_loss = Some(mean(d_losses.into_iter()));
        }
        record.reward = Some(RewardSummary {
            n: mean(sampled.iter().map(|r| r.n)),
            s: mean(sampled.iter().map(|r| r.s)),
            c: mean(sampled.iter().map(|r| r.c)),
            total: mean(sampled.iter().map(|r| r.total)),
            baseline: mean(baseline.into_iter()),
        });
        if let Some(eval) = eval {
            if config.eval_every > 0 && epoch % config.eval_every == 0 {
                let (c, b4) = greedy_eval(&models.generator, eval, vocab, config.max_len)?;
                record.eval_cider = Some(c);
                record.eval_bleu_4 = Some(b4);
                if spec.use_n {
                    let mut r = rng::stream(config.seed, "gan-d-accuracy", epoch as u64);
                    record.d_accuracy = Some(discriminator_accuracy(
                        &models.discriminator,
                        &models.generator,
                        eval,
                        vocab,
                        config.max_len,
                        config.temperature,
                        &mut r,
                    )?);
                }
            }
        }
        outcome.d_queries += record.d_queries;
        outcome.se_queries += record.se_queries;
        if let Some(dir) = out_dir {
            save_model(Some(dir), GAN_G_LAST, &models.generator, config, epoch, Some(&g_adam))?;
            save_model(Some(dir), GAN_D_LAST, &models.discriminator, config, epoch, Some(&d_adam))?;
            append_jsonl(&dir.join(REWARD_LOG), &epoch_rewards)?;
        }
        outcome.rewards.extend(epoch_rewards);
        outcome.log.push(record)?;
        if let Some(dir) = out_dir {
            outcome.log.write_jsonl(&dir.join(GAN_LOG))?;
            outcome.log.write_reward_csv(&dir.join(REWARD_CSV))?;
        }
    }
    save_model(out_dir, GAN_G, &models.generator, config, config.adversarial_epochs, None)?;
    save_model(out_dir, GAN_D, &models.discriminator, config, config.adversarial_epochs, None)?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use rand_distr::{Distribution, StandardNormal};

    use super::*;
    use crate::decoding::{argmax, sample_index};
    use crate::tensor::ParamStore;
    use crate::training::fixtures::tiny;
    use crate::training::Ablation;

    const ARMS: [f64; 3] = [1.0, 0.2, 0.0];

    /// Softmax policy over three arms trained with the self-critical rule:
    /// one sample, the argmax arm as baseline.
    fn bandit(seed: u64, steps: usize) -> f64 {
        let mut init = rng::stream(seed, "bandit-init", 0);
        let theta: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut init)).collect();
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::matrix(1, 3, theta).unwrap()).unwrap();
        let mut adam = Adam::new(0.05);
        let mut r = rng::stream(seed, "bandit", 0);
        for _ in 0..steps {
            let probs = store.get(id).softmax_rows().unwrap();
            let arm = sample_index(probs.data(), &mut r);
            let greedy = argmax(store.get(id).data());
            let adv = ARMS[arm] - ARMS[greedy];
            if adv == 0.0 {
                continue;
            }
            let mut tape = Tape::new();
            let th = tape.param(&store, id);
            let lp = tape.log_softmax(th, 1).unwrap();
            let picked = tape.take(lp, &[arm], &[1, 1]).unwrap();
            let loss = scst_surrogate(&mut tape, picked, &[0], &[adv]).unwrap();
            tape.backward_into(loss, &mut store).unwrap();
            adam.step(&mut store);
        }
        store.get(id).softmax_rows().unwrap().data()[0]
    }

    #[test]
    fn bandit_converges_to_the_best_arm() {
        for seed in 0..10 {
            let p = bandit(seed, 500);
            assert!(p > 0.9, "seed {seed}: p(best) = {p}");
        }
    }

    #[test]
    fn surrogate_gradient_is_advantage_weighted() {
        let tracked = |v: Vec<f64>| {
            let mut t = Tensor::matrix(v.len(), 1, v).unwrap();
            t.set_requires_grad(true);
            t
        };
        let mut tape = Tape::new();
        let lp = tape.leaf(tracked(vec![-0.5, -1.0, -2.0]));
        let loss = scst_surrogate(&mut tape, lp, &[0, 0, 1], &[2.0, -1.0]).unwrap();
        assert!((tape.scalar(loss).unwrap() - (-(2.0 * -1.5) + -(-1.0 * -2.0)) / 2.0).abs() < 1e-12);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(lp).unwrap(), &[-1.0, -1.0, 0.5]);
        let mut tape = Tape::new();
        let lp = tape.leaf(tracked(vec![-0.5, -1.0]));
        let loss = scst_surrogate(&mut tape, lp, &[0, 1], &[0.0, 0.0]).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.wrt(lp).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_advantage_leaves_the_generator_untouched() {
        let t = tiny(3, 10);
        let mut g = t.generator.clone();
        let clips: Vec<&ClipRecord> = t.corpus.train.records().iter().take(3).collect();
        let rolls = rollouts(&g, &clips, 8, 1.0, &mut rng::stream(0, "r", 0)).unwrap();
        let mut adam = Adam::new(1e-3);
        let step = scst_generator_step(&mut g, &mut adam, &clips, &rolls, &[0.0; 3], 1.0).unwrap();
        assert!(!step.stepped);
        assert_eq!(adam.step_count(), 0);
        assert!(g.params().same_values(t.generator.params()));
        let step = scst_generator_step(&mut g, &mut adam, &clips, &rolls, &[0.5, 0.0, -0.2], 1.0).unwrap();
        assert!(step.stepped);
        assert!(!g.params().same_values(t.generator.params()));
    }

    #[test]
    fn teacher_forced_log_probs_match_the_sampler() {
        let t = tiny(8, 10);
        let g = &t.generator;
        let clips: Vec<&ClipRecord> = t.corpus.train.records().iter().take(3).collect();
        for temp in [1.0, 0.7] {
            let rolls = rollouts(g, &clips, 8, temp, &mut rng::stream(1, "r", 0)).unwrap();
            for (clip, r) in clips.iter().zip(&rolls) {
                let steps = r.sample.tokens.len() + 1;
                let mut inputs = vec![SOS];
                inputs.extend_from_slice(&r.sample.tokens);
                let mut tape = Tape::inference();
                let logits = g.forward(&mut tape, &[clip.features()], &[&r.z], &inputs, steps, None).unwrap();
                let logits = tape.scale(logits, 1.0 / temp);
                let lp = tape.log_softmax(logits, 1).unwrap();
                let v = g.config().vocab_size;
                for (s, &want) in r.sample.log_probs.iter().enumerate() {
                    let tok = r.sample.tokens.get(s).copied().unwrap_or(EOS);
                    let got = tape.value(lp).data()[s * v + tok];
                    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
                }
            }
        }
    }

    fn run(ablation: Ablation, lambda: f64) -> (AdversarialModels, AdversarialOutcome, AdversarialModels) {
        let t = tiny(9, 16);
        let mut config = t.config.clone();
        config.ablation = ablation;
        config.lambda = lambda;
        let before = AdversarialModels {
            generator: t.generator,
            discriminator: t.discriminator,
            semantic: t.semantic,
        };
        let mut models = before.clone();
        let out = adversarial_train(&mut models, &t.corpus.train, Some(&t.corpus.eval), &t.vocab, &config, None).unwrap();
        (before, out, models)
    }

    #[test]
    fn language_only_runs_never_query_the_networks() {
        for (ablation, lambda) in [(Ablation::None, 0.0), (Ablation::Le, 0.5)] {
            let (before, out, after) = run(ablation, lambda);
            assert_eq!(out.d_queries, 0);
            assert_eq!(out.se_queries, 0);
            assert_eq!(out.d_steps, 0);
            assert!(after.discriminator.params().same_values(before.discriminator.params()));
            assert!(out.rewards.iter().all(|r| r.reward.n == 0.0 && r.reward.s == 0.0 && r.reward.lambda == 0.0));
            assert!(out.log.records.iter().all(|r| r.d_accuracy.is_none()));
        }
    }

    #[test]
    fn mixed_rewards_are_consistent_and_the_evaluator_stays_frozen() {
        let (before, out, after) = run(Ablation::None, 0.5);
        assert!(!out.rewards.is_empty());
        assert!(out.rewards.iter().all(|r| r.reward.is_consistent()));
        assert!(out.d_queries > 0 && out.se_queries > 0);
        assert!(after.semantic.params().same_values(before.semantic.params()));
        assert!(!after.discriminator.params().same_values(before.discriminator.params()));
        assert_eq!(out.log.records.len(), 2);
    }

    #[test]
    fn ablations_drop_their_network() {
        let (_, out, _) = run(Ablation::Nd, 0.5);
        assert!(out.d_queries > 0 && out.se_queries == 0);
        assert!(out.rewards.iter().all(|r| r.reward.s == 0.0 && r.reward.lambda == 1.0));
        let (before, out, after) = run(Ablation::Se, 0.5);
        assert!(out.d_queries == 0 && out.se_queries > 0);
        assert!(after.discriminator.params().same_values(before.discriminator.params()));
    }

    #[test]
    fn runs_are_deterministic() {
        let (_, a, ma) = run(Ablation::None, 0.5);
        let (_, b, mb) = run(Ablation::None, 0.5);
        assert_eq!(a.rewards, b.rewards);
        assert_eq!(a.log, b.log);
        assert!(ma.generator.params().same_values(mb.generator.params()));
    }
}
