//! Arithmetic, reduction and structural operators.

use super::{hadamard, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Tensor};

/// Output shape of a broadcasting binary op: each dimension must either
/// match or be 1 on one side.
fn broadcast_shape(op: &'static str, a: [usize; 2], b: [usize; 2]) -> Result<[usize; 2]> {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(a[0], b[0]), dim(a[1], b[1])) {
        (Some(r), Some(c)) => Ok([r, c]),
        _ => Err(Error::Shape { op, lhs: a, rhs: b }),
    }
}

#[inline]
fn bidx(r: usize, c: usize, shape: [usize; 2]) -> usize {
    let r = if shape[0] == 1 { 0 } else { r };
    let c = if shape[1] == 1 { 0 } else { c };
    r * shape[1] + c
}

/// Sums a full-size gradient down to a (possibly broadcast) operand shape.
fn reduce_to<T: Scalar>(g: &Tensor<T>, shape: [usize; 2]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Tensor::zeros(shape[0], shape[1]);
    let cols = g.cols();
    if shape == [1, cols] {
        for row in g.data().chunks_exact(cols) {
            for (o, &v) in out.data_mut().iter_mut().zip(row) {
                *o += v;
            }
        }
        return out;
    }
    for (i, &v) in g.data().iter().enumerate() {
        let k = bidx(i / cols, i % cols, shape);
        out.data_mut()[k] += v;
    }
    out
}

fn zip_broadcast<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    out: [usize; 2],
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    if a.shape() == out && b.shape() == out {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::new(out[0], out[1], data);
    }
    let (sa, sb) = (a.shape(), b.shape());
    if sa == out && sb == [1, out[1]] {
        let mut data = Vec::with_capacity(out[0] * out[1]);
        for row in a.data().chunks_exact(out[1]) {
            data.extend(row.iter().zip(b.data()).map(|(&x, &y)| f(x, y)));
        }
        return Tensor::new(out[0], out[1], data);
    }
    let mut data = Vec::with_capacity(out[0] * out[1]);
    for r in 0..out[0] {
        for c in 0..out[1] {
            data.push(f(a.data()[bidx(r, c, sa)], b.data()[bidx(r, c, sb)]));
        }
    }
    Tensor::new(out[0], out[1], data)
}

impl<T: Scalar> Graph<T> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let value = self.value(a).matmul(self.value(b));
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub(super) fn matmul_backward(&self, a: Var, b: Var, gy: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let mut out = Vec::new();
        let (av, bv) = (self.value(a), self.value(b));
        if self.needs(a) {
            let mut ga = Tensor::zeros(av.rows(), av.cols());
            gemm(gy.view(), bv.view().t(), T::zero(), ga.data_mut());
            out.push((a, ga));
        }
        if self.needs(b) {
            let mut gb = Tensor::zeros(bv.rows(), bv.cols());
            gemm(av.view().t(), gy.view(), T::zero(), gb.data_mut());
            out.push((b, gb));
        }
        out
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        let shape = broadcast_shape(name, self.shape(a), self.shape(b))?;
        let value = zip_broadcast(self.value(a), self.value(b), shape, f);
        Ok(self.push(value, op, &[a, b]))
    }

    /// Elementwise sum with row/column broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub(super) fn add_backward(
        &self,
        a: Var,
        b: Var,
        gy: &Tensor<T>,
        b_sign: T,
    ) -> Vec<(Var, Tensor<T>)> {
        let mut out = Vec::new();
        if self.needs(a) {
            out.push((a, reduce_to(gy, self.shape(a))));
        }
        if self.needs(b) {
            let mut gb = reduce_to(gy, self.shape(b));
            if b_sign != T::one() {
                gb = gb.map(|g| g * b_sign);
            }
            out.push((b, gb));
        }
        out
    }

    pub(super) fn mul_backward(&self, a: Var, b: Var, gy: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let mut out = Vec::new();
        let shape = gy.shape();
        if self.needs(a) {
            let full = zip_broadcast(gy, self.value(b), shape, |g, y| g * y);
            out.push((a, reduce_to(&full, self.shape(a))));
        }
        if self.needs(b) {
            let full = zip_broadcast(gy, self.value(a), shape, |g, x| g * x);
            out.push((b, reduce_to(&full, self.shape(b))));
        }
        out
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddScalar(x), &[x])
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::MulScalar(x, c), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.mul_scalar(x, -T::one())
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.abs());
        self.push(value, Op::Abs(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        self.push(value, Op::Square(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .map(|v| T::one() / (T::one() + (-v).exp_fast()));
        self.push(value, Op::Sigmoid(x), &[x])
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.ln());
        self.push(value, Op::Ln(x), &[x])
    }

    pub fn sin(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.sin());
        self.push(value, Op::Sin(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let value = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { v * slope });
        self.push(value, Op::LeakyRelu(x, slope), &[x])
    }

    /// Parametric ReLU; `slope` is `[1 x 1]` or `[1 x cols]`.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let (sx, sa) = (self.shape(x), self.shape(slope));
        if sa[0] != 1 || (sa[1] != 1 && sa[1] != sx[1]) {
            return Err(Error::Shape {
                op: "prelu",
                lhs: sx,
                rhs: sa,
            });
        }
        let value = zip_broadcast(self.value(x), self.value(slope), sx, |v, a| {
            if v > T::zero() {
                v
            } else {
                a * v
            }
        });
        Ok(self.push(value, Op::PRelu(x, slope), &[x, slope]))
    }

    pub(super) fn prelu_backward(&self, x: Var, a: Var, gy: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let (xv, av) = (self.value(x), self.value(a));
        let shape = xv.shape();
        let mut out = Vec::new();
        if self.needs(x) {
            let slope = zip_broadcast(
                xv,
                av,
                shape,
                |v, a| if v > T::zero() { T::one() } else { a },
            );
            out.push((x, hadamard(gy, &slope)));
        }
        if self.needs(a) {
            let full = zip_broadcast(
                gy,
                xv,
                shape,
                |g, v| if v > T::zero() { T::zero() } else { g * v },
            );
            out.push((a, reduce_to(&full, av.shape())));
        }
        out
    }

    /// `min(x, m)` elementwise.
    pub fn clamp_max(&mut self, x: Var, m: T) -> Var {
        let value = self.value(x).map(|v| v.min(m));
        self.push(value, Op::ClampMax(x, m), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        self.push(value, Op::Mean(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        self.push(value, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let s = self.shape(x);
        if s[0] * s[1] != rows * cols {
            return Err(Error::Shape {
                op: "reshape",
                lhs: s,
                rhs: [rows, cols],
            });
        }
        let value = Tensor::new(rows, cols, self.value(x).data().to_vec());
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if start + len > s[0] {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: s,
                rhs: [start, len],
            });
        }
        let v = self.value(x);
        let data = v.data()[start * s[1]..(start + len) * s[1]].to_vec();
        let value = Tensor::new(len, s[1], data);
        Ok(self.push(value, Op::SliceRows { x, start }, &[x]))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if start + len > s[1] {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: s,
                rhs: [start, len],
            });
        }
        let v = self.value(x);
        let mut data = Vec::with_capacity(s[0] * len);
        for r in 0..s[0] {
            data.extend_from_slice(&v.row_slice(r)[start..start + len]);
        }
        let value = Tensor::new(s[0], len, data);
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    pub(super) fn slice_rows_backward(
        &self,
        x: Var,
        start: usize,
        gy: &Tensor<T>,
    ) -> Vec<(Var, Tensor<T>)> {
        let [r, c] = self.shape(x);
        let mut g = Tensor::zeros(r, c);
        g.data_mut()[start * c..start * c + gy.len()].copy_from_slice(gy.data());
        vec![(x, g)]
    }

    pub(super) fn slice_cols_backward(
        &self,
        x: Var,
        start: usize,
        gy: &Tensor<T>,
    ) -> Vec<(Var, Tensor<T>)> {
        let [r, c] = self.shape(x);
        let len = gy.cols();
        let mut g = Tensor::zeros(r, c);
        for i in 0..r {
            g.data_mut()[i * c + start..i * c + start + len].copy_from_slice(gy.row_slice(i));
        }
        vec![(x, g)]
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]);
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1] != first[1] {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: first,
                    rhs: s,
                });
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(rows, first[1], data);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]);
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[0] != first[0] {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: first,
                    rhs: s,
                });
            }
            cols += s[1];
        }
        let mut data = Vec::with_capacity(first[0] * cols);
        for r in 0..first[0] {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let value = Tensor::new(first[0], cols, data);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub(super) fn concat_rows_backward(
        &self,
        parts: &[Var],
        gy: &Tensor<T>,
    ) -> Vec<(Var, Tensor<T>)> {
        let mut out = Vec::new();
        let mut offset = 0;
        for &p in parts {
            let [r, c] = self.shape(p);
            if self.needs(p) {
                let data = gy.data()[offset..offset + r * c].to_vec();
                out.push((p, Tensor::new(r, c, data)));
            }
            offset += r * c;
        }
        out
    }

    pub(super) fn concat_cols_backward(
        &self,
        parts: &[Var],
        gy: &Tensor<T>,
    ) -> Vec<(Var, Tensor<T>)> {
        let mut out = Vec::new();
        let mut offset = 0;
        for &p in parts {
            let [r, c] = self.shape(p);
            if self.needs(p) {
                let mut data = Vec::with_capacity(r * c);
                for i in 0..r {
                    data.extend_from_slice(&gy.row_slice(i)[offset..offset + c]);
                }
                out.push((p, Tensor::new(r, c, data)));
            }
            offset += c;
        }
        out
    }
}
