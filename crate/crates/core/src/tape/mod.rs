//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends one node holding its output value and the saved
//! state its backward rule needs. Nodes are only ever appended, so the node
//! order is a topological order and [`Tape::backward`] is a single reverse
//! sweep. A tape is single-threaded; build one per training step.

mod elementwise;
mod linalg;
mod loss;
mod norm;
mod pool;
mod reduce;

pub use elementwise::{sigmoid, BinaryKind};
pub use linalg::ConvGeometry;
pub use norm::{BnMode, BnState, BN_EPS, BN_MOMENTUM};
pub use pool::RoiBox;

use crate::tensor::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    Relu(Var),
    Sigmoid(Var),
    Matmul(Var, Var),
    Transpose(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    SoftmaxRows(Var),
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    SpatialMax {
        x: Var,
        argmax: Vec<usize>,
    },
    MaxAxis0 {
        x: Var,
        argmax: Vec<usize>,
    },
    SumAxis0(Var),
    Sum(Var),
    Mean(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mode: BnMode,
    },
    Bce {
        probs: Var,
        target: Vec<f64>,
    },
    WeakLoss {
        maps: Var,
        absent: Vec<bool>,
        delta: f64,
    },
    RoiPool {
        x: Var,
        argmax: Vec<usize>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Binary { a, b, .. } | Op::Matmul(a, b) => vec![*a, *b],
            Op::Scale { a, .. }
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::SoftmaxRows(a)
            | Op::SumAxis0(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::Linear { x, w, b } | Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Concat(parts) => parts.clone(),
            Op::Slice { x, .. }
            | Op::MaxPool2d { x, .. }
            | Op::SpatialMax { x, .. }
            | Op::MaxAxis0 { x, .. }
            | Op::RoiPool { x, .. } => vec![*x],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Bce { probs, .. } => vec![*probs],
            Op::WeakLoss { maps, .. } => vec![*maps],
        }
    }
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    /// Records a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    /// Gradient of the last `backward` loss with respect to a leaf.
    ///
    /// Leaves that require grad but were not reached get a zero gradient.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        if !node.requires_grad || !matches!(node.op, Op::Leaf) {
            return None;
        }
        let shape = node.value.shape().to_vec();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Some(Tensor::from_parts(shape, g.clone())),
            None if !self.grads.is_empty() => Some(Tensor::zeros(&shape)),
            None => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(name));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate on leaves and
    /// replace those of any previous sweep.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let mut sink = GradSink {
                nodes: &self.nodes,
                grads: &mut self.grads,
            };
            backward_node(&self.nodes, i, &g, &mut sink);
        }
        Ok(())
    }
}

/// Lazily allocated gradient accumulators for the backward sweep.
pub(crate) struct GradSink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl GradSink<'_> {
    /// Mutable gradient buffer for `v`, or `None` when `v` needs no gradient.
    pub(crate) fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    pub(crate) fn add(&mut self, v: Var, g: &[f64]) {
        if let Some(slot) = self.slot(v) {
            for (s, &x) in slot.iter_mut().zip(g) {
                *s += x;
            }
        }
    }
}

fn backward_node(nodes: &[Node], i: usize, g: &[f64], sink: &mut GradSink<'_>) {
    let node = &nodes[i];
    let val = |v: &Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, a, b } => {
            elementwise::binary_backward(*kind, *a, val(a), *b, val(b), g, sink)
        }
        Op::Scale { a, factor } => {
            if let Some(s) = sink.slot(*a) {
                for (s, &x) in s.iter_mut().zip(g) {
                    *s += factor * x;
                }
            }
        }
        Op::Relu(a) => elementwise::relu_backward(*a, val(a), g, sink),
        Op::Sigmoid(a) => elementwise::sigmoid_backward(*a, &node.value, g, sink),
        Op::Matmul(a, b) => linalg::matmul_backward(*a, val(a), *b, val(b), g, sink),
        Op::Transpose(a) => linalg::transpose_backward(*a, val(a), g, sink),
        Op::Linear { x, w, b } => linalg::linear_backward(*x, val(x), *w, val(w), *b, g, sink),
        Op::Conv2d { x, w, b, geom } => {
            linalg::conv2d_backward(*x, val(x), *w, val(w), *b, *geom, g, sink)
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = val(p).numel();
                sink.add(*p, &g[offset..offset + n]);
                offset += n;
            }
        }
        Op::Slice { x, start } => {
            let inner = node.value.numel() / node.value.shape()[0];
            if let Some(s) = sink.slot(*x) {
                let off = start * inner;
                for (s, &v) in s[off..off + g.len()].iter_mut().zip(g) {
                    *s += v;
                }
            }
        }
        Op::Reshape(a) => sink.add(*a, g),
        Op::SoftmaxRows(a) => reduce::softmax_rows_backward(*a, &node.value, g, sink),
        Op::MaxPool2d { x, argmax }
        | Op::SpatialMax { x, argmax }
        | Op::MaxAxis0 { x, argmax }
        | Op::RoiPool { x, argmax } => {
            if let Some(s) = sink.slot(*x) {
                for (&src, &v) in argmax.iter().zip(g) {
                    s[src] += v;
                }
            }
        }
        Op::SumAxis0(a) => {
            if let Some(s) = sink.slot(*a) {
                let inner = g.len();
                for (k, v) in s.iter_mut().enumerate() {
                    *v += g[k % inner];
                }
            }
        }
        Op::Sum(a) => {
            if let Some(s) = sink.slot(*a) {
                s.iter_mut().for_each(|v| *v += g[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(s) = sink.slot(*a) {
                let scale = g[0] / s.len() as f64;
                s.iter_mut().for_each(|v| *v += scale);
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            mode,
        } => norm::batch_norm_backward(
            *x,
            val(x).shape(),
            *gamma,
            val(gamma),
            *beta,
            xhat,
            inv_std,
            *mode,
            g,
            sink,
        ),
        Op::Bce { probs, target } => loss::bce_backward(*probs, val(probs), target, g, sink),
        Op::WeakLoss {
            maps,
            absent,
            delta,
        } => loss::weak_loss_backward(*maps, val(maps), absent, *delta, g, sink),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss(_))
        ));
        let mut empty = Tape::new();
        assert!(matches!(
            empty.backward(Var(0)),
            Err(TensorError::EmptyTape)
        ));
    }

    #[test]
    fn disconnected_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let unused = tape.param(Tensor::vector(vec![5.0]).unwrap());
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(unused).unwrap().data(), &[0.0]);
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn constants_have_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(c, x).unwrap();
        tape.backward(y).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap().item(), 2.0);
    }

    #[test]
    fn repeated_backward_is_bit_identical() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2, 3], vec![0.3, -1.2, 0.7, 2.1, -0.4, 0.9]).unwrap());
        let w = tape.param(Tensor::new(vec![3, 2], vec![0.5, -0.1, 0.2, 0.8, -0.6, 0.3]).unwrap());
        let h = tape.matmul(x, w).unwrap();
        let s = tape.sigmoid(h).unwrap();
        let sm = tape.softmax_rows(s).unwrap();
        let loss = tape.sum(sm).unwrap();
        let loss2 = tape.mul(loss, loss).unwrap();
        tape.backward(loss2).unwrap();
        let first = (tape.grad(x).unwrap(), tape.grad(w).unwrap());
        tape.backward(loss2).unwrap();
        let second = (tape.grad(x).unwrap(), tape.grad(w).unwrap());
        assert_eq!(
            first.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            second.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(first.1, second.1);
    }
}
