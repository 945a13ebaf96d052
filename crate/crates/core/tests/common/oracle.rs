//! Naive BLEU and CIDEr written straight from their definitions, sharing no
//! code with the library.

use std::collections::HashMap;

fn grams(words: &[String], n: usize) -> HashMap<String, usize> {
    let mut m = HashMap::new();
    if words.len() >= n {
        for i in 0..=words.len() - n {
            *m.entry(words[i..i + n].join(" ")).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU_1..4 with pooled clipped counts and no smoothing.
pub fn bleu(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> [f64; 4] {
    let mut num = [0usize; 4];
    let mut den = [0usize; 4];
    let mut c_len = 0;
    let mut r_len = 0;
    for (c, rs) in cands.iter().zip(refs) {
        c_len += c.len();
        let mut best = usize::MAX;
        let mut best_diff = usize::MAX;
        for r in rs {
            let d = (r.len() as i64 - c.len() as i64).unsigned_abs() as usize;
            if d < best_diff || (d == best_diff && r.len() < best) {
                best_diff = d;
                best = r.len();
            }
        }
        r_len += best;
        for n in 1..=4 {
            let cg = grams(c, n);
            for (g, k) in &cg {
                let mut m = 0;
                for r in rs {
                    m = m.max(*grams(r, n).get(g).unwrap_or(&0));
                }
                num[n - 1] += (*k).min(m);
                den[n - 1] += k;
            }
        }
    }
    let bp = if c_len == 0 {
        0.0
    } else if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    let mut out = [0.0; 4];
    for n in 1..=4 {
        let mut prod_log = 0.0;
        let mut dead = false;
        for k in 0..n {
            if den[k] == 0 || num[k] == 0 {
                dead = true;
                break;
            }
            prod_log += (num[k] as f64 / den[k] as f64).ln();
        }
        out[n - 1] = if dead { 0.0 } else { bp * (prod_log / n as f64).exp() };
    }
    out
}

/// CIDEr of `cand` against `refs`, with document frequencies over `corpus`
/// (one reference set per clip) and idf `ln(N / max(df, 1))`.
pub fn cider(cand: &[String], refs: &[Vec<String>], corpus: &[Vec<Vec<String>>]) -> f64 {
    let big_n = corpus.len() as f64;
    let mut total = 0.0;
    for n in 1..=4 {
        let idf = |g: &str| {
            let df = corpus
                .iter()
                .filter(|clip| clip.iter().any(|r| grams(r, n).contains_key(g)))
                .count();
            (big_n / df.max(1) as f64).ln()
        };
        let vec_of = |w: &[String]| -> HashMap<String, f64> {
            grams(w, n).into_iter().map(|(g, k)| { let v = k as f64 * idf(&g); (g, v) }).collect()
        };
        let cv = vec_of(cand);
        let cn: f64 = cv.values().map(|v| v * v).sum::<f64>().sqrt();
        let mut s = 0.0;
        for r in refs {
            let rv = vec_of(r);
            let rn: f64 = rv.values().map(|v| v * v).sum::<f64>().sqrt();
            if cn > 0.0 && rn > 0.0 {
                let dot: f64 = cv.iter().map(|(g, v)| v * rv.get(g).unwrap_or(&0.0)).sum();
                s += dot / (cn * rn);
            }
        }
        total += s / refs.len() as f64;
    }
    10.0 * total / 4.0
}

/// Random tiny corpus: up to 5 clips, captions of 1..=6 words over a small
/// alphabet so n-gram matches are frequent.
pub fn random_corpus(seed: u64) -> (Vec<Vec<String>>, Vec<Vec<Vec<String>>>) {
    use rand::Rng as _;
    let mut r = capgan::rng::stream(seed, "oracle-corpus", 0);
    let alphabet = ["a", "b", "c", "d", "e"];
    let word = |r: &mut capgan::rng::Rng| {
        let len = r.random_range(1..=6);
        (0..len).map(|_| alphabet[r.random_range(0..alphabet.len())].to_string()).collect::<Vec<_>>()
    };
    let clips = r.random_range(1..=5);
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for _ in 0..clips {
        cands.push(word(&mut r));
        let k = r.random_range(1..=5);
        refs.push((0..k).map(|_| word(&mut r)).collect());
    }
    (cands, refs)
}

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_owned).collect()
}
