//! Central finite-difference gradient checking.
//!
//! The numeric side only evaluates forward values, so it stays independent
//! of every backward rule it is used to verify.

use crate::error::Result;
use crate::tensor::{ParamStore, Tape, Var};

/// Worst disagreement found by [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Relative error with a small absolute floor so exact zeros compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares tape gradients of the scalar returned by `f` against central
/// differences with step `eps`, for every parameter in `store`.
///
/// `max_per_param` caps how many entries of each parameter are perturbed;
/// entries are spread evenly across the tensor.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    eps: f64,
    max_per_param: Option<usize>,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    check_model_gradients(store, same_store, eps, max_per_param, f)
}

fn same_store(s: &mut ParamStore) -> &mut ParamStore {
    s
}

/// [`check_gradients`] for a value that owns its parameter store, such as a
/// full model; `params` exposes the store to perturb.
pub fn check_model_gradients<M, P, F>(
    model: &mut M,
    params: P,
    eps: f64,
    max_per_param: Option<usize>,
    f: F,
) -> Result<GradCheckReport>
where
    P: Fn(&mut M) -> &mut ParamStore,
    F: Fn(&mut Tape, &M) -> Result<Var>,
{
    params(model).zero_grad();
    let mut tape = Tape::new();
    let root = f(&mut tape, model)?;
    let grads = tape.backward(root)?;
    params(model).accumulate(&tape, &grads);
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let eval = |model: &M| -> Result<f64> {
        let mut tape = Tape::inference();
        let root = f(&mut tape, model)?;
        tape.scalar(root)
    };
    let ids: Vec<_> = params(model).ids().collect();
    for id in ids {
        let n = params(model).get(id).len();
        let analytic = params(model).get(id).grad().map(<[f64]>::to_vec).unwrap_or_default();
        let picks: Vec<usize> = match max_per_param {
            Some(k) if k < n => (0..k).map(|j| j * n / k).collect(),
            _ => (0..n).collect(),
        };
        for j in picks {
            let orig = params(model).get(id).data()[j];
            params(model).get_mut(id).data_mut()[j] = orig + eps;
            let up = eval(model)?;
            params(model).get_mut(id).data_mut()[j] = orig - eps;
            let down = eval(model)?;
            params(model).get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = rel_err(analytic[j], numeric);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = params(model).name(id).to_string();
                report.worst_index = j;
                report.analytic = analytic[j];
                report.numeric = numeric;
            }
        }
    }
    params(model).zero_grad();
    Ok(report)
}
