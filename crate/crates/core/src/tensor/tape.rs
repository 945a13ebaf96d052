use std::collections::HashMap;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum UnaryOp {
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Relu,
    Neg,
    Sqrt,
    LogSigmoid,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Param {
        store: u64,
        index: usize,
    },
    MatMul(Var, Var),
    Binary(BinaryOp, Var, Var),
    AddBias(Var, Var),
    Unary(UnaryOp, Var),
    Scale(Var, f64),
    Shift(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LogSoftmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        count: usize,
    },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SumCols(Var),
    Transpose(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Rows {
        table: Var,
        ids: Vec<usize>,
    },
    Take {
        x: Var,
        idx: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    Unfold1d {
        x: Var,
        kernel: usize,
    },
    L2NormalizeRows(Var),
    Reshape(Var),
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) needs_grad: bool,
}

/// Ordered record of a forward computation.
///
/// Nodes are appended in execution order, so every operation's inputs
/// precede it and a single reverse sweep visits each node once. An
/// inference tape keeps values but records no gradient dependencies.
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    recording: bool,
    param_cache: HashMap<(u64, usize), Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            param_cache: HashMap::new(),
        }
    }

    /// A tape that never tracks gradients.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    /// A value that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t.share(), Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = self.recording && t.requires_grad();
        self.push_raw(t.share(), Op::Leaf, needs)
    }

    /// Brings a stored parameter onto the tape. Repeated calls for the same
    /// parameter return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id.index());
        if let Some(&v) = self.param_cache.get(&key) {
            return v;
        }
        let value = store.get(id).share();
        let needs = self.recording;
        let v = self.push_raw(
            value,
            Op::Param {
                store: key.0,
                index: key.1,
            },
            needs,
        );
        self.param_cache.insert(key, v);
        v
    }

    pub(crate) fn param_leaves(&self) -> impl Iterator<Item = (Var, u64, usize)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param { store, index } => Some((Var(i), store, index)),
            _ => None,
        })
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Appends a computed node; dependency info is dropped on inference
    /// tapes or when no input needs a gradient.
    pub(crate) fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs = self.recording && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs { op } else { Op::Leaf };
        self.push_raw(Tensor::from_parts(shape, data), op, needs)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let (before, rest) = grads.split_at_mut(i);
            if let Some(g) = rest[0].as_ref() {
                self.backprop(i, g, before);
            }
        }
        Ok(Gradients { grads })
    }

    /// Backward pass whose parameter gradients are added into `store`.
    pub fn backward_into(&self, root: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(root)?;
        store.accumulate(self, &grads);
        Ok(())
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `∂root/∂v`, or `None` when `v` does not influence the root through
    /// any gradient-tracking path.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}
