//! Finite-difference checks of every differentiable tape operation.

mod common;

use common::grads::{self, OP_TOL};

fn assert_all(errs: Vec<f64>) {
    for (i, e) in errs.iter().enumerate() {
        assert!(*e < OP_TOL, "case {i}: relative error {e}");
    }
}

#[test]
fn matmul() {
    assert_all(grads::matmul());
}

#[test]
fn elementwise_binary() {
    assert_all(grads::elementwise_binary());
}

#[test]
fn add_bias() {
    assert_all(grads::add_bias());
}

#[test]
fn elementwise_unary() {
    assert_all(grads::elementwise_unary());
}

#[test]
fn softmax_log_softmax_and_cross_entropy() {
    assert_all(grads::softmax_family());
}

#[test]
fn reductions_and_layout() {
    assert_all(grads::reductions_and_layout());
}

#[test]
fn layer_norm_and_row_normalisation() {
    assert_all(grads::normalisation());
}

#[test]
fn unfold1d() {
    assert_all(grads::unfold1d());
}

#[test]
fn policy_surrogate_through_logits() {
    assert_all(grads::policy_surrogate());
}

#[test]
fn gru_cell() {
    assert_all(grads::gru_cell());
}
