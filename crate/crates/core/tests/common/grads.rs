//! Finite-difference checks shared by the gradient tests and the acceptance
//! suite. Every check returns the worst relative error it saw.

use capgan::gradcheck::{check_gradients, check_model_gradients};
use capgan::models::{
    Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, SemanticConfig,
    SemanticEvaluator,
};
use capgan::text::{EOS, SOS};
use capgan::training::scst_surrogate;
use capgan::{ParamStore, Result, Tape, Tensor, Var};
use rand::Rng as _;

pub const EPS: f64 = 1e-5;
pub const OP_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;

pub fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut r = capgan::rng::stream(seed, "op-gradients", 0);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Checks `∂ Σ w⊙f(x) / ∂x` for a fixed random weighting `w`, so every
/// output entry contributes a distinct amount.
pub fn check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("x{i}"), t.clone()).unwrap())
        .collect();
    let probe = {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(&store, id)).collect();
        let out = f(&mut tape, &vars).unwrap();
        random(tape.value(out).shape(), 99, -1.0, 1.0)
    };
    check_gradients(&mut store, EPS, None, |tape, store| {
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(store, id)).collect();
        let out = f(tape, &vars)?;
        let w = tape.constant(probe.clone());
        let weighted = tape.mul(out, w)?;
        Ok(tape.sum(weighted))
    })
    .unwrap()
    .max_rel_err
}

pub fn matmul() -> Vec<f64> {
    vec![check(&[random(&[3, 4], 1, -1.0, 1.0), random(&[4, 2], 2, -1.0, 1.0)], |t, v| t.matmul(v[0], v[1]))]
}

pub fn elementwise_binary() -> Vec<f64> {
    let a = random(&[2, 3], 3, -1.0, 1.0);
    let b = random(&[2, 3], 4, 0.5, 2.0);
    let s = random(&[1], 5, 0.5, 2.0);
    vec![
        check(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1])),
        check(&[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1])),
        check(&[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1])),
        check(&[a.clone(), b], |t, v| t.div(v[0], v[1])),
        check(&[a.clone(), s.clone()], |t, v| t.mul(v[0], v[1])),
        check(&[s.clone(), a.clone()], |t, v| t.sub(v[0], v[1])),
        check(&[a, s], |t, v| t.div(v[0], v[1])),
    ]
}

pub fn add_bias() -> Vec<f64> {
    vec![check(&[random(&[3, 4], 6, -1.0, 1.0), random(&[4], 7, -1.0, 1.0)], |t, v| t.add_bias(v[0], v[1]))]
}

pub fn elementwise_unary() -> Vec<f64> {
    let x = random(&[2, 5], 8, -2.0, 2.0);
    let pos = random(&[2, 5], 9, 0.2, 3.0);
    // keep relu inputs away from the kink
    let away: Vec<f64> = x.data().iter().map(|&v| if v.abs() < 0.1 { v + 0.3 } else { v }).collect();
    vec![
        check(std::slice::from_ref(&x), |t, v| Ok(t.sigmoid(v[0]))),
        check(std::slice::from_ref(&x), |t, v| Ok(t.tanh(v[0]))),
        check(std::slice::from_ref(&x), |t, v| Ok(t.exp(v[0]))),
        check(std::slice::from_ref(&x), |t, v| Ok(t.neg(v[0]))),
        check(std::slice::from_ref(&x), |t, v| Ok(t.log_sigmoid(v[0]))),
        check(std::slice::from_ref(&x), |t, v| Ok(t.scale(v[0], -1.7))),
        check(&[x], |t, v| Ok(t.add_scalar(v[0], 0.3))),
        check(std::slice::from_ref(&pos), |t, v| t.log(v[0])),
        check(&[pos], |t, v| t.sqrt(v[0])),
        check(&[Tensor::new(&[2, 5], away).unwrap()], |t, v| Ok(t.relu(v[0]))),
    ]
}

pub fn softmax_family() -> Vec<f64> {
    vec![
        check(&[random(&[5], 10, -2.0, 2.0)], |t, v| t.softmax(v[0], 0)),
        check(&[random(&[3, 4], 11, -2.0, 2.0)], |t, v| t.softmax(v[0], 1)),
        check(&[random(&[3, 4], 12, -2.0, 2.0)], |t, v| t.softmax(v[0], 0)),
        check(&[random(&[3, 4], 13, -2.0, 2.0)], |t, v| t.log_softmax(v[0], 1)),
        check(&[random(&[4, 6], 14, -2.0, 2.0)], |t, v| {
            t.cross_entropy(v[0], &[1, 5, 0, 3], &[true, true, false, true])
        }),
    ]
}

pub fn reductions_and_layout() -> Vec<f64> {
    let x = random(&[3, 4], 15, -1.0, 1.0);
    vec![
        check(std::slice::from_ref(&x), |t, v| Ok(t.sum(v[0]))),
        check(std::slice::from_ref(&x), |t, v| Ok(t.mean(v[0]))),
        check(std::slice::from_ref(&x), |t, v| t.mean_rows(v[0])),
        check(std::slice::from_ref(&x), |t, v| t.sum_cols(v[0])),
        check(std::slice::from_ref(&x), |t, v| t.transpose(v[0])),
        check(std::slice::from_ref(&x), |t, v| t.slice_cols(v[0], 1, 2)),
        check(std::slice::from_ref(&x), |t, v| t.slice_rows(v[0], 1, 2)),
        check(std::slice::from_ref(&x), |t, v| t.reshape(v[0], &[2, 6])),
        check(&[x.clone(), random(&[3, 2], 16, -1.0, 1.0)], |t, v| t.concat_cols(&[v[0], v[1], v[0]])),
        check(&[x.clone(), random(&[1, 4], 17, -1.0, 1.0)], |t, v| t.concat_rows(&[v[0], v[1]])),
        check(std::slice::from_ref(&x), |t, v| t.rows(v[0], &[2, 0, 2, 1])),
        check(&[x], |t, v| t.take(v[0], &[0, 5, 5, 11, 3, 0], &[2, 3])),
    ]
}

pub fn normalisation() -> Vec<f64> {
    vec![
        check(
            &[random(&[3, 5], 18, -2.0, 2.0), random(&[5], 19, 0.5, 1.5), random(&[5], 20, -0.5, 0.5)],
            |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
        ),
        check(&[random(&[3, 4], 23, -1.0, 1.0)], |t, v| t.l2_normalize_rows(v[0])),
    ]
}

pub fn unfold1d() -> Vec<f64> {
    vec![
        check(&[random(&[4, 3], 21, -1.0, 1.0)], |t, v| t.unfold1d(v[0], 3)),
        check(&[random(&[2, 2], 22, -1.0, 1.0)], |t, v| t.unfold1d(v[0], 5)),
    ]
}

/// Surrogate gradient with respect to raw logits, advantages held fixed.
pub fn policy_surrogate() -> Vec<f64> {
    let logits = random(&[3, 5], 24, -2.0, 2.0);
    vec![check(&[logits], |t, v| {
        let lp = t.log_softmax(v[0], 1)?;
        let picked = t.take(lp, &[1, 5 + 4, 10, 10 + 3], &[4, 1])?;
        scst_surrogate(t, picked, &[0, 1, 2, 2], &[0.7, -1.3, 0.4])
    })]
}

type Group = (&'static str, fn() -> Vec<f64>);

pub fn all_ops() -> Vec<(&'static str, f64)> {
    let groups: [Group; 10] = [
        ("matmul", matmul),
        ("elementwise binary", elementwise_binary),
        ("add bias", add_bias),
        ("elementwise unary", elementwise_unary),
        ("softmax family", softmax_family),
        ("reductions and layout", reductions_and_layout),
        ("normalisation", normalisation),
        ("unfold1d", unfold1d),
        ("policy surrogate", policy_surrogate),
        ("gru cell", gru_cell),
    ];
    groups
        .iter()
        .map(|(name, f)| (*name, f().into_iter().fold(0.0, f64::max)))
        .collect()
}

pub fn gru_cell() -> Vec<f64> {
    use capgan::models::layers::Gru;
    let mut store = ParamStore::new();
    let mut r = capgan::rng::stream(4, "gru-check", 0);
    let gru = Gru::new(&mut store, "g", 3, 4, &mut r).unwrap();
    let x = random(&[2, 3], 25, -1.0, 1.0);
    let h = random(&[2, 4], 26, -1.0, 1.0);
    vec![check_gradients(&mut store, EPS, None, |tape, store| {
        let xv = tape.constant(x.clone());
        let hv = tape.constant(h.clone());
        let out = gru.cell(tape, store, xv, hv)?;
        let w = tape.constant(random(&[2, 4], 27, -1.0, 1.0));
        let weighted = tape.mul(out, w)?;
        Ok(tape.sum(weighted))
    })
    .unwrap()
    .max_rel_err]
}

const V: usize = 11;
const FEAT: usize = 4;

/// Moves every bias off zero so no ReLU sits exactly on its kink.
fn jitter_biases(store: &mut ParamStore, seed: u64) {
    let mut r = capgan::rng::stream(seed, "bias-jitter", 0);
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).ends_with(".b") {
            store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = r.random_range(-0.8..0.8));
        }
    }
}

fn clips() -> Vec<Tensor> {
    vec![random(&[5, FEAT], 30, -1.0, 1.0), random(&[3, FEAT], 31, -1.0, 1.0)]
}

pub fn tiny_generator() -> Generator {
    let mut c = GeneratorConfig::new(V, FEAT);
    c.d_model = 8;
    c.heads = 2;
    c.ff_dim = 16;
    c.layers = 1;
    c.noise_dim = 3;
    c.max_len = 5;
    let mut g = Generator::new(c, 11).unwrap();
    jitter_biases(g.params_mut(), 1);
    g
}

/// Teacher-forced cross-entropy of the generator, T = 5 decoder positions.
pub fn generator_loss() -> f64 {
    let mut g = tiny_generator();
    let feats = clips();
    let z = [vec![0.3, -0.5, 1.1], vec![-0.2, 0.9, 0.4]];
    let inputs = vec![SOS, 4, 5, 6, 7, SOS, 8, 9, EOS, 0];
    let targets = vec![4, 5, 6, 7, EOS, 8, 9, EOS, 0, 0];
    let mask = vec![true, true, true, true, true, true, true, true, false, false];
    check_model_gradients(&mut g, Generator::params_mut, EPS, None, |tape, m| {
        let f: Vec<&Tensor> = feats.iter().collect();
        let zs: Vec<&[f64]> = z.iter().map(Vec::as_slice).collect();
        let logits = m.forward(tape, &f, &zs, &inputs, 5, None)?;
        tape.cross_entropy(logits, &targets, &mask)
    })
    .unwrap()
    .max_rel_err
}

/// Policy-gradient surrogate through the whole generator.
pub fn generator_policy_loss() -> f64 {
    let mut g = tiny_generator();
    let feats = clips();
    let z = [vec![1.0, 0.0, -1.0], vec![0.5, 0.5, 0.5]];
    let inputs = vec![SOS, 4, 5, 0, SOS, 6, 7, 8];
    let idx: Vec<usize> = [(0, 4), (1, 5), (2, EOS), (4, 6), (5, 7), (6, 8), (7, EOS)]
        .iter()
        .map(|&(row, tok)| row * V + tok)
        .collect();
    let owners = [0, 0, 0, 1, 1, 1, 1];
    check_model_gradients(&mut g, Generator::params_mut, EPS, None, |tape, m| {
        let f: Vec<&Tensor> = feats.iter().collect();
        let zs: Vec<&[f64]> = z.iter().map(Vec::as_slice).collect();
        let logits = m.forward(tape, &f, &zs, &inputs, 4, None)?;
        let lp = tape.log_softmax(logits, 1)?;
        let picked = tape.take(lp, &idx, &[idx.len(), 1])?;
        scst_surrogate(tape, picked, &owners, &[0.8, -0.3])
    })
    .unwrap()
    .max_rel_err
}

pub fn discriminator_loss() -> f64 {
    let mut c = DiscriminatorConfig::new(V);
    c.embed_dim = 6;
    c.hidden = 5;
    let mut d = Discriminator::new(c, 12).unwrap();
    jitter_biases(d.params_mut(), 2);
    let real = vec![vec![4, 5, 6, EOS], vec![7, EOS]];
    let fake = vec![vec![8, 8, EOS], vec![9, 10, 4, 5, EOS]];
    check_model_gradients(&mut d, Discriminator::params_mut, EPS, None, |tape, m| m.loss(tape, &real, &fake))
        .unwrap()
        .max_rel_err
}

pub fn semantic_loss() -> f64 {
    let mut c = SemanticConfig::new(V, FEAT);
    c.conv_channels = 5;
    c.word_dim = 6;
    c.embed_dim = 7;
    // every hinge stays active, away from its kink
    c.margin = 5.0;
    let mut se = SemanticEvaluator::new(c, 13).unwrap();
    jitter_biases(se.params_mut(), 3);
    let mut feats = clips();
    feats.push(random(&[4, FEAT], 32, -1.0, 1.0));
    let caps = vec![vec![4, 5, EOS], vec![6, EOS], vec![7, 8, 9, EOS]];
    check_model_gradients(&mut se, SemanticEvaluator::params_mut, EPS, None, |tape, m| {
        let f: Vec<&Tensor> = feats.iter().collect();
        m.ranking_loss(tape, &f, &caps)
    })
    .unwrap()
    .max_rel_err
}

pub fn all_models() -> Vec<(&'static str, f64)> {
    vec![
        ("generator cross-entropy", generator_loss()),
        ("generator policy surrogate", generator_policy_loss()),
        ("discriminator loss", discriminator_loss()),
        ("semantic ranking loss", semantic_loss()),
    ]
}
