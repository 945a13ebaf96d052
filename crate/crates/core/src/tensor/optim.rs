use serde::{Deserialize, Serialize};

use super::ParamStore;

/// Adam with bias correction.
///
/// Owns gradient zeroing: [`Adam::step`] applies the update and clears every
/// gradient buffer in the store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: AdamState,
}

/// Moment estimates and step count, kept separately so checkpoints can
/// persist them for resumable runs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamState::default(),
        }
    }

    pub fn with_state(lr: f64, state: AdamState) -> Self {
        Self {
            state,
            ..Self::new(lr)
        }
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    pub fn step_count(&self) -> u64 {
        self.state.step
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        if self.state.m.len() != store.len() {
            self.state.m = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
            self.state.v = self.state.m.clone();
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let tensor = store.get_mut(id);
            let grad: Vec<f64> = tensor.grad().map(<[f64]>::to_vec).unwrap_or_default();
            let m = &mut self.state.m[i];
            let v = &mut self.state.v[i];
            let data = tensor.data_mut();
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                data[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
            tensor.zero_grad();
        }
    }
}
