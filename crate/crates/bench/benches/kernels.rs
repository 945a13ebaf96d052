use std::collections::BTreeMap;
use std::hint::black_box;

use capgan::corpus::{generate_synthetic_corpus, SyntheticConfig};
use capgan::decoding::{beam_decode, greedy_decode, GeneratorStepper};
use capgan::metrics::{corpus_bleu, evaluate};
use capgan::models::{Generator, GeneratorConfig};
use capgan::{Tape, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn matrix(rows: usize, cols: usize, salt: usize) -> Tensor {
    let data = (0..rows * cols).map(|i| ((i * 31 + salt) % 97) as f64 / 97.0 - 0.5).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [32, 128, 256] {
        let (a, b) = (matrix(n, n, 1), matrix(n, n, 2));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::inference();
                let x = tape.constant(a.clone());
                let y = tape.constant(b.clone());
                black_box(tape.matmul(x, y).unwrap());
            })
        });
    }
    group.finish();
}

fn generator() -> (Generator, Tensor) {
    let cfg = GeneratorConfig::new(100, 64);
    let g = Generator::new(cfg, 0).unwrap();
    (g, matrix(32, 64, 3))
}

fn decoding(c: &mut Criterion) {
    let (g, feats) = generator();
    let z = g.zero_noise();
    c.bench_function("generator step logits", |b| {
        b.iter(|| black_box(g.step_logits(&feats, &z, &[1, 10, 11, 12]).unwrap()))
    });
    let stepper = GeneratorStepper::new(&g, &feats, &z).unwrap().with_max_len(12);
    c.bench_function("greedy decode", |b| b.iter(|| black_box(greedy_decode(&stepper).unwrap())));
    let mut group = c.benchmark_group("beam decode");
    group.sample_size(10);
    group.bench_function("beam 5", |b| b.iter(|| black_box(beam_decode(&stepper, 5).unwrap())));
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let corpus = generate_synthetic_corpus(&SyntheticConfig::default(), 0, 200, 4).unwrap();
    let refs: BTreeMap<String, Vec<Vec<String>>> = corpus
        .eval
        .records()
        .iter()
        .map(|r| (r.clip_id().to_owned(), r.references().to_vec()))
        .collect();
    let generated: BTreeMap<String, Vec<Vec<String>>> = refs
        .iter()
        .map(|(k, v)| (k.clone(), v.iter().rev().cloned().collect()))
        .collect();
    let cands: Vec<Vec<String>> = generated.values().map(|c| c[0].clone()).collect();
    let ref_lists: Vec<Vec<Vec<String>>> = refs.values().cloned().collect();
    c.bench_function("corpus bleu", |b| b.iter(|| black_box(corpus_bleu(&cands, &ref_lists).unwrap())));
    c.bench_function("full metric report", |b| b.iter(|| black_box(evaluate(&generated, &refs).unwrap())));
}

criterion_group!(benches, matmul, decoding, metrics);
criterion_main!(benches);
