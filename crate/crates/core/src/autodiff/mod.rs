//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only arena of nodes. Every operator evaluates its
//! value eagerly and records its operands; because operands always precede
//! the node that consumes them, creation order is a topological order and the
//! graph is acyclic by construction. [`Graph::backward`] walks that order in
//! reverse, visiting each node once.
//!
//! Gradients of leaves accumulate across `backward` calls until
//! [`Graph::zero_grad`]. Gradients of interior nodes are transient: they are
//! released as soon as they have been pushed to the node's operands.
//!
//! All tensors are rank 2; see [`crate::tensor`].

mod fused;
mod nn;
mod ops;

pub(crate) use nn::rotate_pairs as nn_rotate;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node of one particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Abs(Var),
    Square(Var),
    Sigmoid(Var),
    Ln(Var),
    Sin(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    PRelu(Var, Var),
    ClampMax(Var, T),
    Maxout {
        x: Var,
        pieces: usize,
        winners: Vec<u32>,
    },
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    Reshape(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Conv1d {
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
    },
    AvgPoolRows {
        x: Var,
        win: usize,
        hop: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    RotatePairs {
        x: Var,
        cos: Tensor<T>,
        sin: Tensor<T>,
    },
    FirAbsPool {
        signal: Var,
        half: Var,
        win: usize,
        hop: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        cache: fused::AttentionCache<T>,
    },
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Only leaves created with `requires_grad` receive
    /// gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        let node = &mut self.nodes[v.0];
        debug_assert_eq!(node.value.shape(), g.shape(), "gradient shape");
        match &mut node.grad {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Back-propagates from a scalar node, adding `d loss / d leaf` into the
    /// gradient of every leaf that requires it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(Error::Shape {
                op: "backward (loss must be scalar)",
                lhs: shape,
                rhs: [1, 1],
            });
        }
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.accumulate(loss, Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_backward(i, &gy);
            for (v, g) in contributions {
                if self.nodes[v.0].requires_grad {
                    self.accumulate(v, g);
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `i` for each operand that requires a
    /// gradient.
    fn local_backward(&self, i: usize, gy: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, gy),
            Op::Add(a, b) => self.add_backward(*a, *b, gy, T::one()),
            Op::Sub(a, b) => self.add_backward(*a, *b, gy, -T::one()),
            Op::Mul(a, b) => self.mul_backward(*a, *b, gy),
            Op::AddScalar(x) => vec![(*x, gy.clone())],
            Op::MulScalar(x, c) => vec![(*x, gy.map(|g| g * *c))],
            Op::Abs(x) => self.unary_backward(*x, gy, |x, _| sign(x)),
            Op::Square(x) => self.unary_backward(*x, gy, |x, _| x + x),
            Op::Sigmoid(x) => {
                let d = y.map(|s| s * (T::one() - s));
                vec![(*x, hadamard(gy, &d))]
            }
            Op::Ln(x) => self.unary_backward(*x, gy, |x, _| x.recip()),
            Op::Sin(x) => self.unary_backward(*x, gy, |x, _| x.cos()),
            Op::Relu(x) => {
                self.unary_backward(
                    *x,
                    gy,
                    |x, _| {
                        if x > T::zero() {
                            T::one()
                        } else {
                            T::zero()
                        }
                    },
                )
            }
            Op::LeakyRelu(x, slope) => {
                let s = *slope;
                self.unary_backward(*x, gy, move |x, _| if x > T::zero() { T::one() } else { s })
            }
            Op::PRelu(x, a) => self.prelu_backward(*x, *a, gy),
            Op::ClampMax(x, m) => {
                let m = *m;
                self.unary_backward(
                    *x,
                    gy,
                    move |x, _| {
                        if x <= m {
                            T::one()
                        } else {
                            T::zero()
                        }
                    },
                )
            }
            Op::Maxout { x, pieces, winners } => self.maxout_backward(*x, *pieces, winners, gy),
            Op::SoftmaxRows(x) => vec![(*x, nn::softmax_rows_backward(y, gy))],
            Op::Sum(x) => {
                let [r, c] = self.shape(*x);
                vec![(*x, Tensor::full(r, c, gy.item()))]
            }
            Op::Mean(x) => {
                let [r, c] = self.shape(*x);
                let g = gy.item() / T::of((r * c) as f64);
                vec![(*x, Tensor::full(r, c, g))]
            }
            Op::Transpose(x) => vec![(*x, gy.transpose())],
            Op::Reshape(x) => {
                let [r, c] = self.shape(*x);
                vec![(*x, Tensor::new(r, c, gy.data().to_vec()))]
            }
            Op::SliceRows { x, start } => self.slice_rows_backward(*x, *start, gy),
            Op::SliceCols { x, start } => self.slice_cols_backward(*x, *start, gy),
            Op::ConcatRows(parts) => self.concat_rows_backward(parts, gy),
            Op::ConcatCols(parts) => self.concat_cols_backward(parts, gy),
            Op::Conv1d {
                x,
                w,
                stride,
                padding,
            } => self.conv1d_backward(*x, *w, *stride, *padding, gy),
            Op::AvgPoolRows { x, win, hop } => {
                let [n, _] = self.shape(*x);
                vec![(*x, nn::avg_pool_rows_backward(gy, n, *win, *hop))]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => self.layer_norm_backward(*x, *gain, *bias, xhat, inv_std, gy),
            Op::RotatePairs { x, cos, sin } => {
                vec![(*x, nn::rotate_pairs(gy, cos, sin, true))]
            }
            Op::FirAbsPool {
                signal,
                half,
                win,
                hop,
            } => self.fir_abs_pool_backward(*signal, *half, *win, *hop, gy),
            Op::Attention { q, k, v, cache } => self.attention_backward(*q, *k, *v, cache, gy),
        }
    }

    fn unary_backward(
        &self,
        x: Var,
        gy: &Tensor<T>,
        dydx: impl Fn(T, T) -> T,
    ) -> Vec<(Var, Tensor<T>)> {
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .zip(gy.data())
            .map(|(&xi, &g)| g * dydx(xi, g))
            .collect();
        vec![(x, Tensor::new(xv.rows(), xv.cols(), data))]
    }
}

pub(crate) fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub(crate) fn hadamard<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x * y)
        .collect();
    Tensor::new(a.rows(), a.cols(), data)
}

#[cfg(test)]
mod tests;
