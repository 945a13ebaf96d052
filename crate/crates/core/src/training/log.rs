use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RewardBreakdown;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Mle,
    Discriminator,
    Semantic,
    Adversarial,
}

/// Mean reward components over one epoch's sampled captions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSummary {
    pub n: f64,
    pub s: f64,
    pub c: f64,
    pub total: f64,
    /// Mean reward of the greedy baseline captions.
    pub baseline: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub stage: Stage,
    /// 1-based within the stage.
    pub epoch: u32,
    pub steps: u64,
    /// Mean training loss of the model this stage optimises (the generator
    /// surrogate in the adversarial stage).
    pub loss: f64,
    pub d_loss: Option<f64>,
    pub d_accuracy: Option<f64>,
    pub se_gap: Option<f64>,
    pub reward: Option<RewardSummary>,
    pub eval_cider: Option<f64>,
    pub eval_bleu_4: Option<f64>,
    pub d_queries: u64,
    pub se_queries: u64,
    /// Generator steps skipped because every advantage was exactly zero.
    pub skipped_steps: u64,
}

impl EpochRecord {
    pub fn new(stage: Stage, epoch: u32) -> Self {
        Self {
            stage,
            epoch,
            steps: 0,
            loss: 0.0,
            d_loss: None,
            d_accuracy: None,
            se_gap: None,
            reward: None,
            eval_cider: None,
            eval_bleu_4: None,
            d_queries: 0,
            se_queries: 0,
            skipped_steps: 0,
        }
    }
}

/// One reward evaluation, as written to the reward log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardLogEntry {
    pub epoch: u32,
    pub step: u64,
    pub clip_id: String,
    /// `sample` or `greedy`.
    pub role: String,
    #[serde(flatten)]
    pub reward: RewardBreakdown,
}

/// Per-epoch records, one JSON object per line on disk.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// Appends a record; epochs must increase within a stage.
    pub fn push(&mut self, record: EpochRecord) -> Result<()> {
        if let Some(prev) = self.records.iter().rev().find(|r| r.stage == record.stage) {
            if record.epoch <= prev.epoch {
                return Err(Error::Contract(format!(
                    "epoch {} logged after epoch {} in stage {:?}",
                    record.epoch, prev.epoch, record.stage
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn extend(&mut self, other: TrainLog) -> Result<()> {
        for r in other.records {
            self.push(r)?;
        }
        Ok(())
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut log = TrainLog::default();
        for (i, line) in body.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: EpochRecord = serde_json::from_str(line).map_err(|e| Error::Format {
                path: path.to_owned(),
                reason: format!("line {}: {e}", i + 1),
            })?;
            log.push(rec)?;
        }
        Ok(log)
    }

    /// Reward-component curves of the adversarial stage.
    pub fn write_reward_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["epoch", "n", "s", "c", "total", "baseline", "d_accuracy", "eval_cider"])
            .map_err(|e| csv_err(path, e))?;
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        for r in self.records.iter().filter(|r| r.stage == Stage::Adversarial) {
            if let Some(m) = &r.reward {
                w.write_record([
                    r.epoch.to_string(),
                    m.n.to_string(),
                    m.s.to_string(),
                    m.c.to_string(),
                    m.total.to_string(),
                    m.baseline.to_string(),
                    opt(r.d_accuracy),
                    opt(r.eval_cider),
                ])
                .map_err(|e| csv_err(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_owned(),
        reason: e.to_string(),
    }
}

pub(crate) fn append_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    for it in items {
        serde_json::to_writer(&mut buf, it)?;
        buf.push(b'\n');
    }
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epochs_must_increase_per_stage() {
        let mut log = TrainLog::default();
        log.push(EpochRecord::new(Stage::Mle, 1)).unwrap();
        log.push(EpochRecord::new(Stage::Semantic, 1)).unwrap();
        assert!(log.push(EpochRecord::new(Stage::Mle, 1)).is_err());
        log.push(EpochRecord::new(Stage::Mle, 2)).unwrap();
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = TrainLog::default();
        let mut r = EpochRecord::new(Stage::Adversarial, 1);
        r.reward = Some(RewardSummary {
            n: 0.25,
            s: 0.1,
            c: 1.0 / 3.0,
            total: 0.7,
            baseline: 0.6,
        });
        log.push(r).unwrap();
        let p = dir.path().join("log.jsonl");
        log.write_jsonl(&p).unwrap();
        assert_eq!(TrainLog::read_jsonl(&p).unwrap(), log);
        log.write_reward_csv(&dir.path().join("r.csv")).unwrap();
    }
}
