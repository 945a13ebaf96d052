//! Parameterised building blocks shared by the three networks.

use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Large negative logit used for masked attention entries; its softmax
/// weight underflows to exactly zero.
pub(crate) const MASKED: f64 = -1e9;

pub(crate) fn xavier(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Result<Tensor> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).map_err(|e| Error::Config(e.to_string()))?;
    Tensor::matrix(fan_in, fan_out, (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect())
}

pub(crate) fn normal(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Result<Tensor> {
    let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

/// `y = x·W + b` with `W: [in × out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Result<Self> {
        let w = store.add(format!("{name}.w"), xavier(rng, in_dim, out_dim)?)?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_dim])?)?;
        Ok(Self { w, b, in_dim, out_dim })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)?)?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim])?)?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, Self::EPS)
    }
}

/// Same-length 1-D convolution over frames, as unfold followed by an affine map.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub kernel: usize,
    pub proj: Linear,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels_in: usize,
        channels_out: usize,
        kernel: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("convolution kernel must be odd, got {kernel}")));
        }
        let proj = Linear::new(store, name, kernel * channels_in, channels_out, rng)?;
        Ok(Self { kernel, proj })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let windows = tape.unfold1d(x, self.kernel)?;
        self.proj.forward(tape, store, windows)
    }
}

/// Single-layer GRU.
///
/// ```text
/// r  = σ(W_r x + U_r h + b_r)
/// u  = σ(W_u x + U_u h + b_u)
/// h~ = tanh(W_h x + U_h (r ⊙ h) + b_h)
/// h' = (1 − u) ⊙ h + u ⊙ h~
/// ```
#[derive(Clone, Debug)]
pub struct Gru {
    /// `[W_r | W_u | W_h]` with the three biases.
    pub input: Linear,
    /// `[U_r | U_u]`.
    pub u_ru: ParamId,
    pub u_h: ParamId,
    pub hidden: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        let input = Linear::new(store, &format!("{name}.input"), in_dim, 3 * hidden, rng)?;
        let u_ru = store.add(format!("{name}.u_ru"), xavier(rng, hidden, 2 * hidden)?)?;
        let u_h = store.add(format!("{name}.u_h"), xavier(rng, hidden, hidden)?)?;
        Ok(Self { input, u_ru, u_h, hidden })
    }

    /// One step for a batch of rows: `x [B×in]`, `h [B×hidden]`.
    pub fn cell(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let n = self.hidden;
        let xw = self.input.forward(tape, store, x)?;
        let u_ru = tape.param(store, self.u_ru);
        let u_h = tape.param(store, self.u_h);
        let hu = tape.matmul(h, u_ru)?;
        let xr = tape.slice_cols(xw, 0, n)?;
        let hr = tape.slice_cols(hu, 0, n)?;
        let r = tape.add(xr, hr)?;
        let r = tape.sigmoid(r);
        let xu = tape.slice_cols(xw, n, n)?;
        let hu2 = tape.slice_cols(hu, n, n)?;
        let u = tape.add(xu, hu2)?;
        let u = tape.sigmoid(u);
        let rh = tape.mul(r, h)?;
        let rh = tape.matmul(rh, u_h)?;
        let xh = tape.slice_cols(xw, 2 * n, n)?;
        let cand = tape.add(xh, rh)?;
        let cand = tape.tanh(cand);
        let keep = tape.neg(u);
        let keep = tape.add_scalar(keep, 1.0);
        let old = tape.mul(keep, h)?;
        let new = tape.mul(u, cand)?;
        tape.add(old, new)
    }

    /// Runs over `inputs` (one `[B×in]` matrix per time step) from a zero
    /// state and returns each row's hidden state after its last valid step.
    pub fn run(&self, tape: &mut Tape, store: &ParamStore, inputs: &[Var], lengths: &[usize]) -> Result<Var> {
        let b = lengths.len();
        if lengths.iter().any(|&l| l == 0 || l > inputs.len()) {
            return Err(Error::Contract("GRU sequence lengths must lie in 1..=steps".into()));
        }
        let mut h = tape.constant(Tensor::zeros(&[b, self.hidden])?);
        for (t, &x) in inputs.iter().enumerate() {
            let next = self.cell(tape, store, x, h)?;
            if lengths.iter().all(|&l| t < l) {
                h = next;
            } else {
                let mut mask = Vec::with_capacity(b * self.hidden);
                for &l in lengths {
                    mask.extend(std::iter::repeat_n(if t < l { 1.0 } else { 0.0 }, self.hidden));
                }
                let mask = tape.constant(Tensor::matrix(b, self.hidden, mask)?);
                let delta = tape.sub(next, h)?;
                let delta = tape.mul(delta, mask)?;
                h = tape.add(h, delta)?;
            }
        }
        Ok(h)
    }
}

/// Multi-head scaled dot-product attention with separate projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("model width {dim} not divisible into {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng)?,
            heads,
        })
    }

    /// Attends projected queries `q [Tq×d]` over projected keys/values
    /// `[Tk×d]`; `mask` (additive, `[Tq×Tk]`) is optional. Returns the
    /// concatenated heads before the output projection.
    pub fn attend(&self, tape: &mut Tape, q: Var, k: Var, v: Var, mask: Option<Var>) -> Result<Var> {
        let d = tape.value(q).shape()[1];
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let mut scores = tape.scale(scores, scale);
            if let Some(m) = mask {
                scores = tape.add(scores, m)?;
            }
            let weights = tape.softmax(scores, 1)?;
            outs.push(tape.matmul(weights, vh)?);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            tape.concat_cols(&outs)
        }
    }
}

/// Additive causal mask: row `t` may attend to columns `≤ t`.
pub(crate) fn causal_mask(t: usize) -> Result<Tensor> {
    let mut data = vec![0.0; t * t];
    for i in 0..t {
        for j in i + 1..t {
            data[i * t + j] = MASKED;
        }
    }
    Tensor::matrix(t, t, data)
}

/// Sinusoidal position encoding rows for positions `start..start + len`.
pub(crate) fn positions(start: usize, len: usize, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(len * dim);
    for pos in start..start + len {
        for i in 0..dim {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 / rate;
            out.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    out
}

/// Inverted dropout: zeroes entries with probability `p` and rescales the rest.
pub(crate) fn dropout(tape: &mut Tape, x: Var, p: f64, rng: &mut Rng) -> Result<Var> {
    use rand::Rng as _;
    if p <= 0.0 {
        return Ok(x);
    }
    let shape = tape.value(x).shape().to_vec();
    let n = tape.value(x).len();
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
    let mask = tape.constant(Tensor::new(&shape, mask)?);
    tape.mul(x, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::rng;

    fn zero_gru(store: &mut ParamStore) -> Gru {
        let mut r = rng::stream(0, "t", 0);
        let gru = Gru::new(store, "g", 3, 2, &mut r).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        gru
    }

    #[test]
    fn gru_zero_parameters_halve_the_state() {
        let mut store = ParamStore::new();
        let gru = zero_gru(&mut store);
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::row(vec![0.3, -1.0, 2.0]).unwrap());
        let h = tape.constant(Tensor::row(vec![0.8, -0.4]).unwrap());
        let out = gru.cell(&mut tape, &store, x, h).unwrap();
        assert_eq!(tape.value(out).data(), &[0.4, -0.2]);

        let x = tape.constant(Tensor::row(vec![0.0; 3]).unwrap());
        let h = tape.constant(Tensor::row(vec![0.0; 2]).unwrap());
        let out = gru.cell(&mut tape, &store, x, h).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0, 0.0]);
    }

    #[test]
    fn gru_cell_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(5, "t", 0);
        let gru = Gru::new(&mut store, "g", 3, 4, &mut r).unwrap();
        let x = normal(&mut r, 2, 3, 1.0).unwrap();
        let h0 = normal(&mut r, 2, 4, 0.5).unwrap();
        let report = check_gradients(&mut store, 1e-5, None, |tape, store| {
            let x = tape.constant(x.clone());
            let h = tape.constant(h0.clone());
            let h1 = gru.cell(tape, store, x, h)?;
            let sq = tape.mul(h1, h1)?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn gru_run_respects_lengths() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(6, "t", 0);
        let gru = Gru::new(&mut store, "g", 2, 3, &mut r).unwrap();
        let xs: Vec<Tensor> = (0..3).map(|_| normal(&mut r, 2, 2, 1.0).unwrap()).collect();
        let mut tape = Tape::inference();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let both = gru.run(&mut tape, &store, &vars, &[3, 1]).unwrap();
        let row1: Vec<Var> = xs[..1]
            .iter()
            .map(|x| tape.constant(Tensor::row(x.row_slice(1).to_vec()).unwrap()))
            .collect();
        let alone = gru.run(&mut tape, &store, &row1, &[1]).unwrap();
        assert_eq!(tape.value(both).row_slice(1), tape.value(alone).data());
    }

    #[test]
    fn causal_mask_is_lower_triangular_inclusive() {
        let m = causal_mask(3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.at(i, j) == 0.0, j <= i);
            }
        }
    }
}
