//! Accuracy metrics (BLEU, CIDEr) and diversity metrics (vocabulary size,
//! mutual BLEU, distinct n-gram ratio).
//!
//! Captions are sequences of content words. Every map is ordered so that
//! floating-point reductions run in a fixed order.

mod report;

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

pub use report::{evaluate, ClipMetrics, MetricReport, ReportMetadata};

pub const MAX_ORDER: usize = 4;

pub type NGram = Vec<String>;

/// Multiset of the n-grams of one order in one caption.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NGramCounts {
    pub n: usize,
    pub counts: BTreeMap<NGram, usize>,
}

impl NGramCounts {
    pub fn of<S: AsRef<str>>(tokens: &[S], n: usize) -> Self {
        let mut counts = BTreeMap::new();
        if n > 0 && tokens.len() >= n {
            for w in tokens.windows(n) {
                let g: NGram = w.iter().map(|t| t.as_ref().to_owned()).collect();
                *counts.entry(g).or_insert(0) += 1;
            }
        }
        Self { n, counts }
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn get(&self, g: &[String]) -> usize {
        self.counts.get(g).copied().unwrap_or(0)
    }
}

/// Corpus BLEU statistics for orders `1..=4`.
#[derive(Clone, Debug, PartialEq)]
pub struct BleuScore {
    /// `bleu[k]` is BLEU_{k+1}.
    pub bleu: [f64; MAX_ORDER],
    /// Clipped modified precisions `p_1..p_4`.
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub candidate_len: usize,
    pub reference_len: usize,
}

fn closest_ref_len(cand_len: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&l| (l.abs_diff(cand_len), l))
        .unwrap_or(0)
}

/// Corpus-level BLEU: clipped n-gram matches and candidate n-gram totals
/// are pooled over the corpus before forming precisions; the brevity penalty
/// uses the summed closest reference lengths. A zero precision gives a zero
/// score (no smoothing).
pub fn corpus_bleu(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<BleuScore> {
    if candidates.is_empty() {
        return Err(Error::Contract("BLEU needs at least one candidate".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Contract("BLEU needs one reference set per candidate".into()));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut c, mut r) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::Contract("every candidate needs at least one reference".into()));
        }
        c += cand.len();
        r += closest_ref_len(cand.len(), refs);
        for n in 1..=MAX_ORDER {
            let counts = NGramCounts::of(cand, n);
            let ref_counts: Vec<NGramCounts> = refs.iter().map(|x| NGramCounts::of(x, n)).collect();
            for (g, &k) in &counts.counts {
                let max_ref = ref_counts.iter().map(|rc| rc.get(g)).max().unwrap_or(0);
                matches[n - 1] += k.min(max_ref);
            }
            totals[n - 1] += counts.total();
        }
    }
    let mut precisions = [0.0; MAX_ORDER];
    for k in 0..MAX_ORDER {
        precisions[k] = if totals[k] == 0 { 0.0 } else { matches[k] as f64 / totals[k] as f64 };
    }
    let bp = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let mut bleu = [0.0; MAX_ORDER];
    let mut log_sum = 0.0;
    let mut zero = false;
    for k in 0..MAX_ORDER {
        if precisions[k] == 0.0 {
            zero = true;
        } else {
            log_sum += precisions[k].ln();
        }
        bleu[k] = if zero { 0.0 } else { bp * (log_sum / (k + 1) as f64).exp() };
    }
    Ok(BleuScore {
        bleu,
        precisions,
        brevity_penalty: bp,
        candidate_len: c,
        reference_len: r,
    })
}

/// BLEU_n of one candidate against its references.
pub fn sentence_bleu(candidate: &[String], references: &[Vec<String>], n: usize) -> Result<f64> {
    if !(1..=MAX_ORDER).contains(&n) {
        return Err(Error::Contract(format!("BLEU order must lie in 1..=4, got {n}")));
    }
    let s = corpus_bleu(&[candidate.to_vec()], &[references.to_vec()])?;
    Ok(s.bleu[n - 1])
}

/// Per-order document frequencies over a reference corpus.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DocFreqTable {
    pub df: [BTreeMap<NGram, usize>; MAX_ORDER],
    pub corpus_size: usize,
}

impl DocFreqTable {
    /// `df(g)` counts the clips whose reference set contains `g` at least once.
    pub fn build(references: &[Vec<Vec<String>>]) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::Contract("document frequencies need a non-empty corpus".into()));
        }
        let mut df: [BTreeMap<NGram, usize>; MAX_ORDER] = Default::default();
        for refs in references {
            for n in 1..=MAX_ORDER {
                let mut seen = BTreeSet::new();
                for r in refs {
                    seen.extend(NGramCounts::of(r, n).counts.into_keys());
                }
                for g in seen {
                    *df[n - 1].entry(g).or_insert(0) += 1;
                }
            }
        }
        Ok(Self {
            df,
            corpus_size: references.len(),
        })
    }

    pub fn get(&self, g: &[String]) -> usize {
        let n = g.len();
        if n == 0 || n > MAX_ORDER {
            return 0;
        }
        self.df[n - 1].get(g).copied().unwrap_or(0)
    }

    /// `ln N − ln max(1, df)`; unseen n-grams get the full `ln N`.
    pub fn idf(&self, g: &[String]) -> f64 {
        (self.corpus_size as f64).ln() - (self.get(g).max(1) as f64).ln()
    }
}

struct TfIdf {
    weights: BTreeMap<NGram, f64>,
    norm: f64,
}

fn tfidf(tokens: &[String], n: usize, df: &DocFreqTable) -> TfIdf {
    let mut weights = BTreeMap::new();
    let mut sq = 0.0;
    for (g, k) in NGramCounts::of(tokens, n).counts {
        let w = k as f64 * df.idf(&g);
        sq += w * w;
        weights.insert(g, w);
    }
    TfIdf {
        weights,
        norm: sq.sqrt(),
    }
}

fn cosine(a: &TfIdf, b: &TfIdf) -> f64 {
    if a.norm == 0.0 || b.norm == 0.0 {
        return 0.0;
    }
    let dot: f64 = a
        .weights
        .iter()
        .filter_map(|(g, w)| b.weights.get(g).map(|v| w * v))
        .sum();
    dot / (a.norm * b.norm)
}

/// CIDEr: for each order, the mean TF-IDF cosine between the candidate and
/// each reference; the orders are averaged and scaled by 10.
pub fn cider(candidate: &[String], references: &[Vec<String>], df: &DocFreqTable) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::Contract("CIDEr needs at least one reference".into()));
    }
    let mut total = 0.0;
    for n in 1..=MAX_ORDER {
        let c = tfidf(candidate, n, df);
        let mut s = 0.0;
        for r in references {
            s += cosine(&c, &tfidf(r, n, df));
        }
        total += s / references.len() as f64;
    }
    Ok(10.0 * total / MAX_ORDER as f64)
}

const MARKERS: [&str; 3] = ["<pad>", "<sos>", "<eos>"];

/// Distinct content words over every generated caption.
pub fn vocab_size<'a, I>(captions: I) -> usize
where
    I: IntoIterator<Item = &'a Vec<String>>,
{
    let mut set = BTreeSet::new();
    for c in captions {
        for w in c {
            if !MARKERS.contains(&w.as_str()) {
                set.insert(w.as_str());
            }
        }
    }
    set.len()
}

/// Mean over captions of BLEU_n against the clip's other captions.
pub fn mbleu_clip(captions: &[Vec<String>], n: usize) -> Result<f64> {
    if captions.len() < 2 {
        return Err(Error::Contract(format!(
            "mutual BLEU needs at least two captions, got {}",
            captions.len()
        )));
    }
    let mut total = 0.0;
    for i in 0..captions.len() {
        let others: Vec<Vec<String>> = captions
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, c)| c.clone())
            .collect();
        total += sentence_bleu(&captions[i], &others, n)?;
    }
    Ok(total / captions.len() as f64)
}

/// Corpus mutual BLEU: the mean of [`mbleu_clip`] over clips.
pub fn mbleu(captions_per_clip: &[Vec<Vec<String>>], n: usize) -> Result<f64> {
    if captions_per_clip.is_empty() {
        return Err(Error::Contract("mutual BLEU needs at least one clip".into()));
    }
    let mut total = 0.0;
    for set in captions_per_clip {
        total += mbleu_clip(set, n)?;
    }
    Ok(total / captions_per_clip.len() as f64)
}

/// Distinct n-grams in a clip's caption set over its total word count.
pub fn div_n_clip(captions: &[Vec<String>], n: usize) -> Result<f64> {
    if !(1..=2).contains(&n) {
        return Err(Error::Contract(format!("div-n is defined for n in 1..=2, got {n}")));
    }
    let words: usize = captions.iter().map(Vec::len).sum();
    if words == 0 {
        return Ok(0.0);
    }
    let mut distinct = BTreeSet::new();
    for c in captions {
        distinct.extend(NGramCounts::of(c, n).counts.into_keys());
    }
    Ok(distinct.len() as f64 / words as f64)
}

pub fn div_n(captions_per_clip: &[Vec<Vec<String>>], n: usize) -> Result<f64> {
    if captions_per_clip.is_empty() {
        return Err(Error::Contract("div-n needs at least one clip".into()));
    }
    let mut total = 0.0;
    for set in captions_per_clip {
        total += div_n_clip(set, n)?;
    }
    Ok(total / captions_per_clip.len() as f64)
}

/// Splits a caption string into words.
pub fn words(caption: &str) -> Vec<String> {
    caption.split_whitespace().map(str::to_owned).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<String> {
        words(s)
    }

    #[test]
    fn ngram_totals() {
        let c = NGramCounts::of(&w("a b a b"), 2);
        assert_eq!(c.total(), 3);
        assert_eq!(c.get(&w("a b")), 2);
        assert_eq!(NGramCounts::of(&w("a"), 2).total(), 0);
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let c = w("a dog barks at the mailman");
        assert_eq!(sentence_bleu(&c, std::slice::from_ref(&c), 4).unwrap(), 1.0);
        assert_eq!(sentence_bleu(&c, &[w("rain falls on roofs")], 1).unwrap(), 0.0);
    }

    #[test]
    fn bleu_clipping_example() {
        let s = corpus_bleu(&[w("the the the the the the the")], &[vec![w("the cat is on the mat")]]).unwrap();
        assert_eq!(s.precisions[0], 2.0 / 7.0);
    }

    #[test]
    fn bleu_rejects_empty_corpus() {
        assert!(corpus_bleu(&[], &[]).is_err());
    }

    #[test]
    fn doc_freq_counts_clips() {
        let refs = vec![
            vec![w("a dog barks"), w("a dog")],
            vec![w("the dog")],
            vec![w("a dog runs")],
            vec![w("rain")],
            vec![w("a dog sleeps")],
        ];
        let df = DocFreqTable::build(&refs).unwrap();
        assert_eq!(df.get(&w("a dog")), 3);
        assert_eq!(df.get(&w("dog")), 4);
        assert_eq!(df.corpus_size, 5);
        let single = DocFreqTable::build(&[vec![w("a dog")]]).unwrap();
        assert_eq!((single.get(&w("a dog")), single.corpus_size), (1, 1));
    }

    #[test]
    fn cider_identity_and_disjoint() {
        let refs = vec![vec![w("a dog barks loudly outside")], vec![w("rain falls on a roof")]];
        let df = DocFreqTable::build(&refs).unwrap();
        let c = cider(&refs[0][0], &refs[0], &df).unwrap();
        assert!((c - 10.0).abs() < 1e-12);
        assert_eq!(cider(&w("engine revs up"), &refs[0], &df).unwrap(), 0.0);
    }

    #[test]
    fn vocab_counts() {
        assert_eq!(vocab_size(&[w("a b"), w("a c")]), 3);
        assert_eq!(vocab_size(&[w("x y"), w("x y")]), 2);
    }

    #[test]
    fn mutual_bleu_extremes() {
        let same = vec![w("a dog barks at night"); 5];
        assert_eq!(mbleu_clip(&same, 4).unwrap(), 1.0);
        let disjoint: Vec<Vec<String>> = ["a b c d", "e f g h", "i j k l", "m n o p", "q r s t"]
            .iter()
            .map(|s| w(s))
            .collect();
        assert_eq!(mbleu_clip(&disjoint, 4).unwrap(), 0.0);
        assert!(mbleu_clip(&same[..1], 4).is_err());
    }

    #[test]
    fn distinct_ratios() {
        assert_eq!(div_n_clip(&[w("a a"), w("a a")], 1).unwrap(), 0.25);
        assert_eq!(div_n_clip(&[w("a b c")], 1).unwrap(), 1.0);
        assert_eq!(div_n_clip(&[w("a")], 2).unwrap(), 0.0);
    }
}
