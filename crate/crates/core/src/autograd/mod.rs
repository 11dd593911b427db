//! Reverse-mode automatic differentiation over an append-only node arena.
//!
//! Every operation appends one node holding its output value and the
//! information its local gradient rule needs. Because nodes can only refer to
//! earlier nodes, insertion order is a topological order and `backward` simply
//! walks the arena from the loss towards the leaves.

mod conv;
mod elementwise;
mod linalg;
mod norm;
mod shape;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    AddRow(Var, Var),
    MulRows(Var, Var),
    Sum(Var),
    Mean(Var),
    Sigmoid(Var),
    Gelu(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<S>,
    },
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    MaxPoolAxis {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
        argmax: Vec<u32>,
    },
    Reshape(Var),
    Transpose2d(Var),
    Concat(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Mse {
        pred: Var,
        target: Vec<S>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Arena of tensors produced by one forward pass.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`Graph::grad`] but shaped, with zeros for leaves the loss does not reach.
    pub fn grad_tensor(&self, v: Var) -> Tensor<S> {
        let shape = self.shape(v).to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient matches value shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub(crate) fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Populates gradients of every leaf reachable from `loss`.
    ///
    /// Gradients of intermediate nodes are released as soon as they have been
    /// propagated; only leaf gradients remain readable afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![S::one()]);
        let nodes: &[Node<S>] = &self.nodes;
        let grads = &mut self.grads;
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut sink = Sink { nodes, grads: &mut grads[..] };
            backprop(&mut sink, node, &g);
        }
        Ok(())
    }
}

/// Gradient accumulator handed to the per-op backward rules.
pub(crate) struct Sink<'a, S> {
    nodes: &'a [Node<S>],
    grads: &'a mut [Option<Vec<S>>],
}

impl<'a, S: Scalar> Sink<'a, S> {
    pub(crate) fn val(&self, v: Var) -> &'a Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Mutable gradient buffer of `v`, or `None` if `v` is not differentiated.
    pub(crate) fn slot(&mut self, v: Var) -> Option<&mut [S]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![S::zero(); n]))
    }

    pub(crate) fn accumulate(&mut self, v: Var, g: &[S]) {
        if let Some(dst) = self.slot(v) {
            for (d, s) in dst.iter_mut().zip(g) {
                *d += *s;
            }
        }
    }
}

fn backprop<S: Scalar>(sink: &mut Sink<'_, S>, node: &Node<S>, g: &[S]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => elementwise::backward_add(sink, *a, *b, g),
        Op::Sub(a, b) => elementwise::backward_sub(sink, *a, *b, g),
        Op::Mul(a, b) => elementwise::backward_mul(sink, *a, *b, g),
        Op::Div(a, b) => elementwise::backward_div(sink, *a, *b, g),
        Op::Scale(a, c) => elementwise::backward_scale(sink, *a, *c, g),
        Op::AddScalar(a) => sink.accumulate(*a, g),
        Op::AddRow(x, r) => elementwise::backward_add_row(sink, *x, *r, g),
        Op::MulRows(x, s) => elementwise::backward_mul_rows(sink, *x, *s, g),
        Op::Sum(a) => elementwise::backward_sum(sink, *a, g[0]),
        Op::Mean(a) => {
            let n = S::lit(sink.val(*a).numel() as f64);
            elementwise::backward_sum(sink, *a, g[0] / n)
        }
        Op::Sigmoid(a) => elementwise::backward_sigmoid(sink, *a, out.data(), g),
        Op::Gelu(a) => elementwise::backward_gelu(sink, *a, g),
        Op::Linear { x, w, b } => linalg::backward_linear(sink, *x, *w, *b, g),
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            norm::backward_layer_norm(sink, *x, *gamma, *beta, xhat, rstd, g)
        }
        Op::Attention { q, k, v, heads, probs } => {
            linalg::backward_attention(sink, *q, *k, *v, *heads, probs, g)
        }
        Op::Conv3d { x, w, b, stride, pad } => {
            conv::backward_conv3d(sink, *x, *w, *b, *stride, *pad, out.shape(), g)
        }
        Op::ConvTranspose3d { x, w, b, stride } => {
            conv::backward_conv_transpose3d(sink, *x, *w, *b, *stride, out.shape(), g)
        }
        Op::MaxPoolAxis { x, outer, n, inner, argmax } => {
            shape::backward_max_pool(sink, *x, *outer, *n, *inner, argmax, g)
        }
        Op::Reshape(a) => sink.accumulate(*a, g),
        Op::Transpose2d(a) => shape::backward_transpose2d(sink, *a, g),
        Op::Concat(parts) => shape::backward_concat(sink, parts, g),
        Op::GatherRows { x, idx } => shape::backward_gather_rows(sink, *x, idx, g),
        Op::Mse { pred, target } => elementwise::backward_mse(sink, *pred, target, g[0]),
    }
}

pub(crate) fn same_shape<S: Scalar>(g: &Graph<S>, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::dim(
            what,
            format!("operand shapes {:?} and {:?} differ", g.shape(a), g.shape(b)),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros([3]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_input() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new([4], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0, 6.0]);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full([2], 1.5));
        let p = g.param(Tensor::full([2], 7.0));
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert!(g.grad(p).is_none());
        assert_eq!(g.grad_tensor(p).data(), &[0.0, 0.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::full([2], 2.0));
        let x = g.param(Tensor::full([2], 3.0));
        let y = g.mul(c, x).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // loss = sum((x + x) * x) = 2 sum(x^2) -> grad 4x
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let y = g.add(x, x).unwrap();
        let z = g.mul(y, x).unwrap();
        let loss = g.sum(z);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0]);
    }
}
