use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{cider, corpus_bleu, div_n_clip, mbleu_clip, sentence_bleu, vocab_size, DocFreqTable};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportMetadata {
    pub n_clips: usize,
    pub min_captions_per_clip: usize,
    pub max_captions_per_clip: usize,
    /// How the headline accuracy columns pick a caption per clip.
    pub accuracy_protocol: String,
    pub bleu_smoothing: String,
    pub cider_variant: String,
    pub idf_corpus: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipMetrics {
    pub clip_id: String,
    pub n_captions: usize,
    pub bleu_4: f64,
    pub cider: f64,
    pub mbleu_4: Option<f64>,
    pub div_1: f64,
    pub div_2: f64,
}

/// Full evaluation of a generated caption set against references.
///
/// `bleu_*` and `cider` score each clip's first (top-ranked) caption;
/// the `*_all` fields pool every generated caption as a separate candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub cider: f64,
    /// Always null: SPICE is not computed.
    pub spider: Option<f64>,
    pub vocab_size: usize,
    /// Null when no clip has two or more captions.
    pub mbleu_4: Option<f64>,
    pub div_1: f64,
    pub div_2: f64,
    pub bleu_1_all: f64,
    pub bleu_2_all: f64,
    pub bleu_3_all: f64,
    pub bleu_4_all: f64,
    pub cider_all: f64,
    pub metadata: ReportMetadata,
    pub per_clip: Vec<ClipMetrics>,
}

/// Scores `generated` (clip id → ranked captions) against `references`
/// (clip id → reference captions). Both must cover exactly the same clips;
/// CIDEr document frequencies come from `references`.
pub fn evaluate(
    generated: &BTreeMap<String, Vec<Vec<String>>>,
    references: &BTreeMap<String, Vec<Vec<String>>>,
) -> Result<MetricReport> {
    let missing: Vec<&str> = references
        .keys()
        .filter(|k| !generated.contains_key(*k))
        .map(String::as_str)
        .collect();
    let extra: Vec<&str> = generated
        .keys()
        .filter(|k| !references.contains_key(*k))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::Contract(format!(
            "clip ids differ between captions and references; missing captions for [{}]; unknown clips [{}]",
            missing.join(", "),
            extra.join(", ")
        )));
    }
    if references.is_empty() {
        return Err(Error::Contract("nothing to evaluate".into()));
    }
    if let Some((id, _)) = generated.iter().find(|(_, caps)| caps.is_empty()) {
        return Err(Error::clip(id, "no generated captions"));
    }
    let refs: Vec<Vec<Vec<String>>> = references.values().cloned().collect();
    let df = DocFreqTable::build(&refs)?;

    let top1: Vec<Vec<String>> = generated.values().map(|c| c[0].clone()).collect();
    let top = corpus_bleu(&top1, &refs)?;
    let mut pooled_c = Vec::new();
    let mut pooled_r = Vec::new();
    let mut per_clip = Vec::with_capacity(refs.len());
    let (mut cider_top, mut cider_all, mut n_all) = (0.0, 0.0, 0usize);
    let (mut mb_sum, mut mb_n, mut d1, mut d2) = (0.0, 0usize, 0.0, 0.0);
    for ((id, caps), r) in generated.iter().zip(&refs) {
        let c_top = cider(&caps[0], r, &df)?;
        cider_top += c_top;
        for c in caps {
            cider_all += cider(c, r, &df)?;
            n_all += 1;
            pooled_c.push(c.clone());
            pooled_r.push(r.clone());
        }
        let mb = if caps.len() >= 2 { Some(mbleu_clip(caps, 4)?) } else { None };
        if let Some(v) = mb {
            mb_sum += v;
            mb_n += 1;
        }
        let (a, b) = (div_n_clip(caps, 1)?, div_n_clip(caps, 2)?);
        d1 += a;
        d2 += b;
        per_clip.push(ClipMetrics {
            clip_id: id.clone(),
            n_captions: caps.len(),
            bleu_4: sentence_bleu(&caps[0], r, 4)?,
            cider: c_top,
            mbleu_4: mb,
            div_1: a,
            div_2: b,
        });
    }
    let all = corpus_bleu(&pooled_c, &pooled_r)?;
    let n = refs.len() as f64;
    let counts: Vec<usize> = generated.values().map(Vec::len).collect();
    Ok(MetricReport {
        bleu_1: top.bleu[0],
        bleu_2: top.bleu[1],
        bleu_3: top.bleu[2],
        bleu_4: top.bleu[3],
        cider: cider_top / n,
        spider: None,
        vocab_size: vocab_size(generated.values().flatten()),
        mbleu_4: (mb_n > 0).then(|| mb_sum / mb_n as f64),
        div_1: d1 / n,
        div_2: d2 / n,
        bleu_1_all: all.bleu[0],
        bleu_2_all: all.bleu[1],
        bleu_3_all: all.bleu[2],
        bleu_4_all: all.bleu[3],
        cider_all: cider_all / n_all as f64,
        metadata: ReportMetadata {
            n_clips: refs.len(),
            min_captions_per_clip: counts.iter().copied().min().unwrap_or(0),
            max_captions_per_clip: counts.iter().copied().max().unwrap_or(0),
            accuracy_protocol: "top-1 caption per clip; *_all fields pool every caption".into(),
            bleu_smoothing: "none: a zero n-gram precision gives a zero score".into(),
            cider_variant: "CIDEr (no length penalty or clipping)".into(),
            idf_corpus: "evaluation references".into(),
        },
        per_clip,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "null".to_owned(), |x| format!("{x:.4}"))
}

impl MetricReport {
    pub fn has_non_finite(&self) -> bool {
        let head = [
            self.bleu_1,
            self.bleu_2,
            self.bleu_3,
            self.bleu_4,
            self.cider,
            self.div_1,
            self.div_2,
            self.bleu_1_all,
            self.bleu_2_all,
            self.bleu_3_all,
            self.bleu_4_all,
            self.cider_all,
            self.mbleu_4.unwrap_or(0.0),
        ];
        head.iter().any(|v| !v.is_finite())
            || self
                .per_clip
                .iter()
                .any(|c| ![c.bleu_4, c.cider, c.div_1, c.div_2, c.mbleu_4.unwrap_or(0.0)].iter().all(|v| v.is_finite()))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&body).map_err(|e| Error::Format {
            path: path.to_owned(),
            reason: e.to_string(),
        })
    }

    /// Plain-text table: the headline columns first, then the remaining
    /// accuracy figures.
    pub fn to_text_table(&self) -> String {
        let head = [
            ("BLEU_4", format!("{:.4}", self.bleu_4)),
            ("CIDEr", format!("{:.4}", self.cider)),
            ("SPIDEr", fmt_opt(self.spider)),
            ("vocab size", self.vocab_size.to_string()),
            ("mBLEU_4", fmt_opt(self.mbleu_4)),
            ("div-1", format!("{:.4}", self.div_1)),
            ("div-2", format!("{:.4}", self.div_2)),
        ];
        let extra = [
            ("BLEU_1", format!("{:.4}", self.bleu_1)),
            ("BLEU_2", format!("{:.4}", self.bleu_2)),
            ("BLEU_3", format!("{:.4}", self.bleu_3)),
            ("BLEU_4 all", format!("{:.4}", self.bleu_4_all)),
            ("CIDEr all", format!("{:.4}", self.cider_all)),
        ];
        let mut out = String::new();
        for row in [&head[..], &extra[..]] {
            let widths: Vec<usize> = row.iter().map(|(h, v)| h.len().max(v.len())).collect();
            let line = |f: &dyn Fn(&(&str, String)) -> String| {
                row.iter()
                    .zip(&widths)
                    .map(|(c, &w)| format!("{:>w$}", f(c)))
                    .collect::<Vec<_>>()
                    .join("  ")
            };
            let _ = writeln!(out, "{}", line(&|c| c.0.to_owned()));
            let _ = writeln!(out, "{}", line(&|c| c.1.clone()));
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "{} clips, {}-{} captions per clip",
            self.metadata.n_clips, self.metadata.min_captions_per_clip, self.metadata.max_captions_per_clip
        );
        out
    }

    pub fn write_per_clip_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["clip_id", "n_captions", "bleu_4", "cider", "mbleu_4", "div_1", "div_2"])
            .map_err(|e| csv_err(path, e))?;
        for c in &self.per_clip {
            w.write_record([
                c.clip_id.clone(),
                c.n_captions.to_string(),
                c.bleu_4.to_string(),
                c.cider.to_string(),
                c.mbleu_4.map_or_else(String::new, |v| v.to_string()),
                c.div_1.to_string(),
                c.div_2.to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
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
