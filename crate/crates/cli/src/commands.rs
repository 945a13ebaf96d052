use std::fs;
use std::path::{Path, PathBuf};

use capgan::decoding::{read_captions, write_captions};
use capgan::models::{load_checkpoint, Checkpoint, Discriminator, Generator, Model, SemanticEvaluator};
use capgan::pipeline::{evaluate_captions, generate_split};
use capgan::training::{
    adversarial_train, discriminator_pretrain, files, mle_pretrain, semantic_pretrain, Ablation, AdversarialModels,
    EpochRecord, TrainLog,
};

use crate::args::{Common, EvaluateArgs, GanArgs, GenerateArgs, StageArgs};
use crate::config::RunConfig;
use crate::data::{self, Corpus};
use crate::error::{CliError, Result};

/// Defaults, then the config file, then whichever flags were given.
fn resolve(common: &Common, extra: impl FnOnce(&mut RunConfig)) -> Result<RunConfig> {
    let mut c = RunConfig::load(common.config.as_deref())?;
    if let Some(d) = &common.data {
        c.paths.data_dir = Some(d.clone());
    }
    if let Some(r) = &common.run_dir {
        c.paths.run_dir = Some(r.clone());
    }
    if let Some(s) = common.seed {
        c.seed = s;
    }
    if let Some(b) = common.batch_size {
        c.train.batch_size = b;
    }
    if let Some(lr) = common.lr {
        c.train.learning_rate = lr;
    }
    if let Some(m) = common.max_len {
        c.train.max_len = m;
        c.decode.max_len = m;
    }
    extra(&mut c);
    c.finish()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn checkpoint<M: Model>(which: &'static str, path: &Path) -> Result<Checkpoint<M>> {
    if !path.is_file() {
        return Err(CliError::MissingCheckpoint {
            which,
            path: path.to_owned(),
        });
    }
    Ok(load_checkpoint(path)?)
}

fn check_vocab(corpus: &Corpus, vocab_size: usize, what: &str) -> Result<()> {
    if corpus.vocab.len() != vocab_size {
        return Err(CliError::Data(format!(
            "{what} expects a vocabulary of {vocab_size} ids but the corpus has {}",
            corpus.vocab.len()
        )));
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn print_log(log: &TrainLog) {
    for r in &log.records {
        print_record(r);
    }
}

fn print_record(r: &EpochRecord) {
    let mut line = format!("{:?} epoch {}: loss {:.4}", r.stage, r.epoch, r.loss).to_lowercase();
    if let Some(a) = r.d_accuracy {
        line.push_str(&format!(", D accuracy {a:.4}"));
    }
    if let Some(g) = r.se_gap {
        line.push_str(&format!(", SE gap {g:.4}"));
    }
    if let Some(w) = &r.reward {
        line.push_str(&format!(", reward {:.4} (baseline {:.4})", w.total, w.baseline));
    }
    if r.eval_cider.is_some() {
        line.push_str(&format!(", eval CIDEr {} BLEU_4 {}", fmt_opt(r.eval_cider), fmt_opt(r.eval_bleu_4)));
    }
    println!("{line}");
}

pub fn pretrain(args: &StageArgs) -> Result<()> {
    let cfg = resolve(&args.common, |c| {
        if let Some(e) = args.epochs {
            c.train.mle_epochs = e;
        }
    })?;
    let corpus = data::load(cfg.data_dir()?)?;
    let run = cfg.run_dir()?;
    create_dir(run)?;
    cfg.write(&run.join("run_config.pretrain.toml"))?;
    let gen_cfg = cfg.model.generator(corpus.vocab.len(), corpus.feat_dim()?, cfg.train.max_len);
    let mut g = Generator::new(gen_cfg, cfg.seed)?;
    let log = mle_pretrain(&mut g, &corpus.train, Some(&corpus.eval), &corpus.vocab, &cfg.train, Some(run), args.resume)?;
    print_log(&log);
    println!("wrote {}", run.join(files::MLE_FINAL).display());
    Ok(())
}

pub fn pretrain_d(args: &StageArgs) -> Result<()> {
    if args.resume {
        return Err(CliError::Usage("--resume applies to generator pretraining only".into()));
    }
    let cfg = resolve(&args.common, |c| {
        if let Some(e) = args.epochs {
            c.train.d_pretrain_epochs = e;
        }
        if let Some(g) = &args.generator {
            c.paths.generator = Some(g.clone());
        }
    })?;
    let corpus = data::load(cfg.data_dir()?)?;
    let run = cfg.run_dir()?;
    let g_path = cfg.paths.generator.clone().unwrap_or_else(|| run.join(files::MLE_FINAL));
    let g: Generator = checkpoint("generator", &g_path)?.model;
    check_vocab(&corpus, g.config().vocab_size, "the generator")?;
    create_dir(run)?;
    cfg.write(&run.join("run_config.pretrain-d.toml"))?;
    let mut d = Discriminator::new(cfg.model.discriminator(corpus.vocab.len()), cfg.seed)?;
    let log = discriminator_pretrain(&mut d, &g, &corpus.train, Some(&corpus.eval), &corpus.vocab, &cfg.train, Some(run))?;
    print_log(&log);
    println!("wrote {}", run.join(files::D_FINAL).display());
    Ok(())
}

pub fn pretrain_se(args: &StageArgs) -> Result<()> {
    if args.resume || args.generator.is_some() {
        return Err(CliError::Usage(
            "--resume and --generator do not apply to semantic evaluator pretraining".into(),
        ));
    }
    let cfg = resolve(&args.common, |c| {
        if let Some(e) = args.epochs {
            c.train.se_pretrain_epochs = e;
        }
    })?;
    let corpus = data::load(cfg.data_dir()?)?;
    let run = cfg.run_dir()?;
    create_dir(run)?;
    cfg.write(&run.join("run_config.pretrain-se.toml"))?;
    let mut se = SemanticEvaluator::new(cfg.model.semantic(corpus.vocab.len(), corpus.feat_dim()?), cfg.seed)?;
    let log = semantic_pretrain(&mut se, &corpus.train, Some(&corpus.eval), &corpus.vocab, &cfg.train, Some(run))?;
    print_log(&log);
    println!("wrote {}", run.join(files::SE_FINAL).display());
    Ok(())
}

/// One adversarial run to perform: its output directory name and settings.
fn gan_runs(args: &GanArgs, base: &RunConfig) -> Vec<(String, f64, Ablation)> {
    if let Some(a) = args.ablation {
        let a = Ablation::from(a);
        let name = format!("{a:?}").to_lowercase();
        return vec![(format!("gan-ablation-{name}"), base.train.lambda, a)];
    }
    let lambdas = match (&args.lambda_sweep, args.lambda) {
        (Some(sweep), _) => sweep.clone(),
        (None, Some(l)) => vec![l],
        (None, None) => vec![base.train.lambda],
    };
    lambdas
        .into_iter()
        .map(|l| (format!("gan-lambda-{l:?}"), l, base.train.ablation))
        .collect()
}

pub fn train_gan(args: &GanArgs) -> Result<()> {
    let base = resolve(&args.common, |c| {
        if let Some(e) = args.epochs {
            c.train.adversarial_epochs = e;
        }
        if let Some(lr) = args.adversarial_lr {
            c.train.adversarial_learning_rate = Some(lr);
        }
    })?;
    let corpus = data::load(base.data_dir()?)?;
    let run = base.run_dir()?;
    let g: Generator = checkpoint("generator", &run.join(files::MLE_FINAL))?.model;
    let d: Discriminator = checkpoint("discriminator", &run.join(files::D_FINAL))?.model;
    let se: SemanticEvaluator = checkpoint("semantic evaluator", &run.join(files::SE_FINAL))?.model;
    check_vocab(&corpus, g.config().vocab_size, "the generator")?;

    for (name, lambda, ablation) in gan_runs(args, &base) {
        let mut cfg = base.clone();
        cfg.train.lambda = lambda;
        cfg.train.ablation = ablation;
        let cfg = cfg.finish()?;
        let dir = run.join(&name);
        create_dir(&dir)?;
        cfg.write(&dir.join("run_config.toml"))?;
        let mut models = AdversarialModels {
            generator: g.clone(),
            discriminator: d.clone(),
            semantic: se.clone(),
        };
        println!("{name}:");
        let out = adversarial_train(&mut models, &corpus.train, Some(&corpus.eval), &corpus.vocab, &cfg.train, Some(&dir))?;
        print_log(&out.log);
        println!(
            "{name}: {} generator steps, {} discriminator steps, {} D queries, {} SE queries",
            out.g_steps, out.d_steps, out.d_queries, out.se_queries
        );
        if out.d_queries == 0 && out.se_queries == 0 {
            println!("{name}: conventional RL mode, the discriminator and semantic evaluator were never queried");
        }
        println!("wrote {}", dir.join(files::GAN_G).display());
    }
    Ok(())
}

fn sibling_config(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "captions".into());
    out.with_file_name(format!("{stem}.config.toml"))
}

pub fn generate(args: &GenerateArgs) -> Result<()> {
    let cfg = resolve(&args.common, |c| {
        if let Some(n) = args.n {
            c.decode.n_captions = n;
        }
        if let Some(b) = args.beam_size {
            c.decode.beam_size = b;
        }
        if let Some(p) = &args.checkpoint {
            c.paths.generator = Some(p.clone());
        }
    })?;
    let ckpt = match (&cfg.paths.generator, args.mode) {
        (Some(p), _) => p.clone(),
        (None, crate::args::ModeArg::Mle) => cfg.run_dir()?.join(files::MLE_FINAL),
        (None, crate::args::ModeArg::Gan) => {
            return Err(CliError::Usage("--mode gan needs --checkpoint (an adversarially trained generator)".into()))
        }
    };
    let g: Generator = checkpoint("generator", &ckpt)?.model;
    let corpus = data::load(cfg.data_dir()?)?;
    check_vocab(&corpus, g.config().vocab_size, "the generator")?;
    let captions = generate_split(&g, corpus.split(args.split), &corpus.vocab, args.mode.into(), &cfg.decode)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_captions(&args.out, &captions)?;
    cfg.write(&sibling_config(&args.out))?;
    let short = captions.iter().filter(|c| c.captions.len() < cfg.decode.n_captions).count();
    println!(
        "wrote {} clips to {}{}",
        captions.len(),
        args.out.display(),
        if short > 0 { format!(" ({short} with fewer than {} captions)", cfg.decode.n_captions) } else { String::new() }
    );
    Ok(())
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let corpus = data::load(&args.data)?;
    let captions = read_captions(&args.captions)?;
    let report = evaluate_captions(&captions, corpus.split(args.split))?;
    let out = args.out.clone().unwrap_or_else(|| {
        let stem = args.captions.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        args.captions.with_file_name(format!("{stem}.report.json"))
    });
    report.write_json(&out)?;
    if let Some(csv) = &args.per_clip_csv {
        report.write_per_clip_csv(csv)?;
    }
    print!("{}", report.to_text_table());
    println!("wrote {}", out.display());
    Ok(())
}
