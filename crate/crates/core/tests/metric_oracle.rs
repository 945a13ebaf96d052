//! BLEU and CIDEr against a brute-force recomputation and hand-worked cases.

mod common;

use capgan::metrics::{cider, corpus_bleu, mbleu_clip, DocFreqTable};
use common::oracle::{self, words};

const CORPORA: u64 = 200;

#[test]
fn bleu_matches_brute_force_on_random_corpora() {
    for seed in 0..CORPORA {
        let (cands, refs) = oracle::random_corpus(seed);
        let got = corpus_bleu(&cands, &refs).unwrap().bleu;
        let want = oracle::bleu(&cands, &refs);
        for n in 0..4 {
            assert!((got[n] - want[n]).abs() < 1e-9, "seed {seed} order {}: {} vs {}", n + 1, got[n], want[n]);
        }
    }
}

#[test]
fn cider_matches_brute_force_on_random_corpora() {
    for seed in 0..CORPORA {
        let (cands, refs) = oracle::random_corpus(seed);
        let df = DocFreqTable::build(&refs).unwrap();
        for (c, r) in cands.iter().zip(&refs) {
            let got = cider(c, r, &df).unwrap();
            let want = oracle::cider(c, r, &refs);
            assert!((got - want).abs() < 1e-9, "seed {seed}: {got} vs {want}");
        }
    }
}

#[test]
fn clipped_unigram_precision() {
    let s = corpus_bleu(&[words("the the the the the the the")], &[vec![words("the cat is on the mat")]]).unwrap();
    assert_eq!(s.precisions[0], 2.0 / 7.0);
}

#[test]
fn two_clip_cider_by_hand() {
    // idf is ln 2 for every n-gram except "a" (in both clips, idf 0).
    // Orders 1 and 2 give cosines 1/2 and 1/√2 against the two references;
    // orders 3 and 4 share nothing.
    let refs = vec![
        vec![words("a dog barks"), words("a dog")],
        vec![words("a cat meows")],
    ];
    let df = DocFreqTable::build(&refs).unwrap();
    let got = cider(&words("a dog meows"), &refs[0], &df).unwrap();
    let want = 1.25 + 2.5 / 2f64.sqrt();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn mutual_bleu_one_word_of_ten() {
    // p1..p4 = 9/10, 7/9, 5/8, 3/7, whose product is 3/16.
    let caps = vec![words("a b c d e f g h i j"), words("a b c d e x g h i j")];
    let got = mbleu_clip(&caps, 4).unwrap();
    assert!((got - (3.0f64 / 16.0).powf(0.25)).abs() < 1e-12, "{got}");
}
