//! Rotary position embedding.
//!
//! Coordinates `(2i, 2i+1)` of the vector at position `t` are rotated by the
//! angle `t * theta_i`, `theta_i = 10000^(-2i/d)`. Since rotations compose,
//! `<R(t) q, R(s) k> = <q, R(s - t) k>`: attention logits between rotated
//! queries and keys depend on positions only through their offset.

use crate::autodiff::{nn_rotate, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Clone, Debug, PartialEq)]
pub struct RopeTable {
    dim: usize,
    theta: Vec<f64>,
}

impl RopeTable {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "rotary embedding needs an even, positive width (got {dim})"
            )));
        }
        let theta = (0..dim / 2)
            .map(|i| ROPE_BASE.powf(-2.0 * i as f64 / dim as f64))
            .collect();
        Ok(RopeTable { dim, theta })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// `[len x d/2]` cosine and sine tables for positions `start..start+len`.
    pub fn tables<T: Scalar>(&self, start: usize, len: usize) -> (Tensor<T>, Tensor<T>) {
        let half = self.theta.len();
        let mut cos = Vec::with_capacity(len * half);
        let mut sin = Vec::with_capacity(len * half);
        for t in start..start + len {
            for &th in &self.theta {
                let (s, c) = (t as f64 * th).sin_cos();
                cos.push(T::of(c));
                sin.push(T::of(s));
            }
        }
        (Tensor::new(len, half, cos), Tensor::new(len, half, sin))
    }

    fn check(&self, cols: usize) -> Result<()> {
        if cols != self.dim {
            return Err(Error::Shape {
                op: "rope",
                lhs: [0, cols],
                rhs: [0, self.dim],
            });
        }
        Ok(())
    }

    /// Rotates row `r` of `x` as position `start + r`.
    pub fn apply<T: Scalar>(&self, x: &Tensor<T>, start: usize) -> Result<Tensor<T>> {
        self.check(x.cols())?;
        let (cos, sin) = self.tables(start, x.rows());
        Ok(nn_rotate(x, &cos, &sin, false))
    }

    pub fn apply_graph<T: Scalar>(&self, g: &mut Graph<T>, x: Var, start: usize) -> Result<Var> {
        let [rows, cols] = g.shape(x);
        self.check(cols)?;
        let (cos, sin) = self.tables(start, rows);
        g.rotate_pairs(x, cos, sin)
    }
}

/// Rotates the rows of `x: [T x d]` as positions `0..T`.
pub fn apply_rope<T: Scalar>(x: &Tensor<T>, table: &RopeTable) -> Result<Tensor<T>> {
    table.apply(x, 0)
}

/// Fixed interleaved sinusoidal encoding, `[len x d]`, same frequency
/// schedule as the rotary table.
pub fn sinusoidal_table<T: Scalar>(len: usize, dim: usize) -> Result<Tensor<T>> {
    let rope = RopeTable::new(dim)?;
    let mut data = Vec::with_capacity(len * dim);
    for t in 0..len {
        for &th in rope.theta() {
            let (s, c) = (t as f64 * th).sin_cos();
            data.push(T::of(s));
            data.push(T::of(c));
        }
    }
    Ok(Tensor::new(len, dim, data))
}
