//! Corpus preparation and loading.

use std::fs;
use std::path::{Path, PathBuf};

use capgan::corpus::{
    generate_synthetic_corpus, load_dataset, read_features, write_dataset, ClipRecord, DatasetSplit, SplitName,
    SyntheticConfig,
};
use capgan::text::{normalize_and_tokenize, Vocabulary};
use serde::{Deserialize, Serialize};

use crate::args::{PrepareArgs, SplitArg};
use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";
pub const VOCAB: &str = "vocab.txt";
pub const PREPARE_CONFIG: &str = "prepare_config.toml";
const SPLITS: [(SplitName, &str); 2] = [(SplitName::Train, "train"), (SplitName::Evaluation, "evaluation")];

/// Record of how a corpus directory was produced.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PrepareRecord {
    source: String,
    seed: Option<u64>,
    clips: Option<usize>,
    classes: Option<usize>,
    feat_dim: Option<usize>,
}

pub struct Corpus {
    pub train: DatasetSplit,
    pub eval: DatasetSplit,
    pub vocab: Vocabulary,
}

impl Corpus {
    pub fn split(&self, which: SplitArg) -> &DatasetSplit {
        match which {
            SplitArg::Train => &self.train,
            SplitArg::Evaluation => &self.eval,
        }
    }

    pub fn feat_dim(&self) -> Result<usize> {
        self.train
            .feat_dim()
            .ok_or_else(|| CliError::Data("training split is empty".into()))
    }
}

pub fn load(dir: &Path) -> Result<Corpus> {
    let manifest = |name: &str| dir.join(name).join(MANIFEST);
    for (_, name) in SPLITS {
        if !manifest(name).is_file() {
            return Err(CliError::Data(format!(
                "no prepared corpus in {} (missing {}); run prepare-data first",
                dir.display(),
                manifest(name).display()
            )));
        }
    }
    Ok(Corpus {
        train: load_dataset(&manifest("train"), SplitName::Train)?,
        eval: load_dataset(&manifest("evaluation"), SplitName::Evaluation)?,
        vocab: Vocabulary::load(&dir.join(VOCAB))?,
    })
}

pub fn prepare(args: &PrepareArgs) -> Result<()> {
    let out = &args.out;
    let outputs: Vec<PathBuf> = SPLITS
        .iter()
        .map(|(_, n)| out.join(n))
        .chain([out.join(VOCAB), out.join(PREPARE_CONFIG)])
        .collect();
    if outputs.iter().any(|p| p.exists()) {
        if !args.force {
            return Err(CliError::Usage(format!(
                "{} already holds a corpus; pass --force to replace it",
                out.display()
            )));
        }
        for p in &outputs {
            let removed = if p.is_dir() { fs::remove_dir_all(p) } else if p.exists() { fs::remove_file(p) } else { Ok(()) };
            removed.map_err(|e| CliError::io(p, e))?;
        }
    }

    let (train, eval, record) = match &args.import {
        Some(src) => {
            let train = import_split(src, SplitName::Train, "train")?;
            let eval = import_split(src, SplitName::Evaluation, "evaluation")?;
            let record = PrepareRecord {
                source: format!("import:{}", src.display()),
                seed: None,
                clips: None,
                classes: None,
                feat_dim: None,
            };
            (train, eval, record)
        }
        None => {
            let cfg = SyntheticConfig {
                feat_dim: args.feat_dim,
                ..SyntheticConfig::default()
            };
            let c = generate_synthetic_corpus(&cfg, args.seed, args.clips, args.classes)?;
            let record = PrepareRecord {
                source: "synthetic".into(),
                seed: Some(args.seed),
                clips: Some(args.clips),
                classes: Some(args.classes),
                feat_dim: Some(args.feat_dim),
            };
            (c.train, c.eval, record)
        }
    };
    if let (Some(a), Some(b)) = (train.feat_dim(), eval.feat_dim()) {
        if a != b {
            return Err(CliError::Data(format!("feature dimension differs between splits ({a} vs {b})")));
        }
    }

    let vocab = Vocabulary::build(&train.reference_token_lists(), 1)?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    for (split, (_, name)) in [&train, &eval].into_iter().zip(SPLITS) {
        write_dataset(split, &out.join(name), MANIFEST)?;
    }
    vocab.save(&out.join(VOCAB))?;
    let text = toml::to_string(&record).expect("prepare record serialises");
    fs::write(out.join(PREPARE_CONFIG), text).map_err(|e| CliError::io(out.join(PREPARE_CONFIG), e))?;

    println!(
        "train clips {}, evaluation clips {}, vocabulary {} ({} words plus 4 reserved)",
        train.len(),
        eval.len(),
        vocab.len(),
        vocab.len() - 4
    );
    Ok(())
}

/// Reads `<src>/<dir>/captions.csv` with a header row
/// `file_name,caption_1,...,caption_5` and one feature file per clip at
/// `<src>/<dir>/features/<file_name>.dcfeat`.
fn import_split(src: &Path, name: SplitName, dir: &str) -> Result<DatasetSplit> {
    let base = src.join(dir);
    let csv_path = base.join("captions.csv");
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(&csv_path)
        .map_err(|e| CliError::Data(format!("{}: {e}", csv_path.display())))?;
    let mut records = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| CliError::Data(format!("{}: {e}", csv_path.display())))?;
        let clip_id = row
            .get(0)
            .filter(|s| !s.trim().is_empty())
            .ok_or_else(|| CliError::Data(format!("{} row {}: missing file_name", csv_path.display(), line + 2)))?
            .trim()
            .to_owned();
        let clip_err = |reason: String| CliError::Core(capgan::Error::Clip {
            clip_id: clip_id.clone(),
            reason,
        });
        let captions: Vec<&str> = row.iter().skip(1).filter(|c| !c.trim().is_empty()).collect();
        let references = captions
            .iter()
            .map(|c| normalize_and_tokenize(c))
            .collect::<capgan::Result<Vec<_>>>()
            .map_err(|e| clip_err(e.to_string()))?;
        let feat_path = base.join("features").join(format!("{clip_id}.dcfeat"));
        let features = read_features(&feat_path).map_err(|e| clip_err(e.to_string()))?;
        records.push(ClipRecord::new(clip_id.clone(), features, references)?);
    }
    if records.is_empty() {
        return Err(CliError::Data(format!("{} lists no clips", csv_path.display())));
    }
    Ok(DatasetSplit::new(name, records)?)
}
