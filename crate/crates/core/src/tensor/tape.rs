use std::collections::{HashMap, HashSet};

use super::{shape_str, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    MatMul {
        a: Var,
        b: Var,
    },
    Bmm {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Concat {
        axis: usize,
        parts: Vec<Var>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Sum(Var),
    Mean(Var),
}

pub(crate) struct Node<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub op: Op<T>,
    pub tracked: bool,
}

/// Define-by-run record of a forward computation.
///
/// Every op appends a node whose inputs are already on the tape, so node
/// order is a topological order. [`Tape::backward`] consumes the tape.
pub struct Tape<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    param_of: Vec<(Var, ParamId)>,
    retained: HashSet<usize>,
    updates: Vec<(ParamId, Vec<T>)>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            param_of: Vec::new(),
            retained: HashSet::new(),
            updates: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never tracks gradients, for evaluation.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records `t` as an input. Gradients are kept for it when
    /// `t.requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let tracked = self.grad_enabled && t.requires_grad;
        let shape = t.shape().to_vec();
        self.push_raw(shape, t.into_data(), Op::Leaf, tracked)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push_raw(shape, t.into_data(), Op::Leaf, false)
    }

    /// Brings a parameter of `store` onto the tape. Repeated calls for the
    /// same id return the same variable.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        let tracked = self.grad_enabled && t.requires_grad;
        let v = self.push_raw(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, tracked);
        self.params.insert(id, v);
        if tracked {
            self.param_of.push((v, id));
        }
        v
    }

    /// Keeps the gradient of an intermediate value after backward.
    pub fn retain_grad(&mut self, v: Var) {
        self.retained.insert(v.0);
    }

    /// Queues a new value for a non-trainable buffer (batch-norm running
    /// statistics). The caller applies them with
    /// [`ParamStore::apply_updates`] once the step is complete.
    pub(crate) fn queue_update(&mut self, id: ParamId, value: Vec<T>) {
        self.updates.push((id, value));
    }

    pub fn take_updates(&mut self) -> Vec<(ParamId, Vec<T>)> {
        std::mem::take(&mut self.updates)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape matches data")
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Single element of a one-element value.
    pub fn scalar(&self, v: Var) -> Result<T> {
        let d = self.data(v);
        if d.len() != 1 {
            return Err(Error::shape(format!(
                "expected a scalar, got {}",
                shape_str(self.shape(v))
            )));
        }
        Ok(d[0])
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let tracked = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].tracked);
        let op = if tracked { op } else { Op::Leaf };
        self.push_raw(shape, data, op, tracked)
    }

    fn push_raw(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, tracked: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a one-element `loss`.
    ///
    /// Returns the gradients of every tracked leaf and of every retained
    /// value. Parameter gradients can then be added into their store with
    /// [`ParamStore::accumulate`].
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward on an empty tape"));
        }
        let node = &self.nodes[loss.0];
        if node.data.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {}",
                shape_str(&node.shape)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        let mut kept = HashMap::new();
        if node.tracked {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !matches!(node.op, Op::Leaf) {
                super::ops::backward_node(&self.nodes, i, &g, &mut grads);
            }
            if matches!(node.op, Op::Leaf) || self.retained.contains(&i) {
                kept.insert(i, g);
            }
        }
        Ok(Gradients {
            grads: kept,
            param_of: self.param_of,
        })
    }

    /// Backward followed by accumulation into `store`.
    pub fn backward_into(self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.backward(loss)?;
        store.accumulate(&grads)
    }
}

/// Gradients produced by one reverse pass.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: HashMap<usize, Vec<T>>,
    param_of: Vec<(Var, ParamId)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(&v.0).map(Vec::as_slice)
    }

    /// Gradient of every tracked parameter that the loss reached.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> + '_ {
        self.param_of
            .iter()
            .filter_map(|(v, id)| self.grads.get(&v.0).map(|g| (*id, g.as_slice())))
    }
}

pub(crate) fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var, contrib: Vec<T>) {
    if !nodes[v.0].tracked {
        return;
    }
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}
