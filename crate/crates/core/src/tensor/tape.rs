//! Reverse-mode gradient tape.
//!
//! Values are recorded in creation order, so the node list is already a
//! topological order and backward is a single reverse sweep. A node keeps
//! its backward rule only when at least one input requires a gradient;
//! everything else is stored as a plain leaf.

use std::collections::HashMap;

use super::ops::{ConvGeom, NormLayout, Unary};
use super::resample::ResamplePlan;
use super::value::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Unary(Var, Unary),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    L1(Var, Var),
    Mse(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow { a: Var, axis: usize, start: usize },
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Softmax(Var, usize),
    Norm { x: Var, gain: Var, bias: Var, layout: NormLayout, mean: Vec<f64>, rstd: Vec<f64> },
    AvgPool2(Var),
    Upsample2(Var),
    Gather { table: Var, rows: Vec<usize> },
    StraightThrough(Var),
    L2Normalize(Var, Vec<f64>),
    Resample(Var, Box<ResamplePlan>),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::L1(a, b) | Op::Mse(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Shift(a)
            | Op::Unary(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumAxis(a, _)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::Narrow { a, .. }
            | Op::Softmax(a, _)
            | Op::AvgPool2(a)
            | Op::Upsample2(a)
            | Op::StraightThrough(a)
            | Op::L2Normalize(a, _)
            | Op::Resample(a, _) => vec![*a],
            Op::Concat(parts, _) => parts.clone(),
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Norm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Gather { table, .. } => vec![*table],
        }
    }
}

pub(crate) struct Node {
    pub value: Tensor,
    pub requires_grad: bool,
    pub op: Op,
}

#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    pub(crate) bindings: HashMap<(String, bool), Var>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that accumulates a gradient.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Stop-gradient: same value, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`], if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub(crate) fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Clears gradients so [`Tape::backward`] may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.consumed = false;
    }

    /// Accumulates d(loss)/d(v) into every reachable node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Backward("tape already consumed; call reset_grads() first".into()));
        }
        if self.nodes.is_empty() {
            return Err(Error::Backward("tape is empty".into()));
        }
        let shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::Backward(format!("loss must be scalar, got shape {shape:?}")));
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::from_parts(shape, vec![1.0]));

        let Tape { nodes, grads, .. } = self;
        let nodes: &[Node] = nodes;
        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut sink = GradSink { nodes, grads };
            super::ops::backward(&nodes[i], i, g.data(), &mut sink);
            grads[i] = Some(g);
        }
        Ok(())
    }
}

/// Write side of the backward sweep: lazily allocated, summed gradient buffers.
pub(crate) struct GradSink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Tensor>],
}

impl<'a> GradSink<'a> {
    pub fn value(&self, v: Var) -> &'a Tensor {
        &self.nodes[v.0].value
    }

    pub fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Mutable gradient buffer for `v`, zero-initialised on first use.
    pub fn buf(&mut self, v: Var) -> &mut [f64] {
        let shape = self.nodes[v.0].value.shape();
        self.grads[v.0]
            .get_or_insert_with(|| Tensor::zeros(shape.to_vec()))
            .data_mut()
    }

    /// Runs `f` on the buffer only when `v` takes a gradient.
    pub fn with(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if self.wants(v) {
            f(self.buf(v));
        }
    }
}
