//! Network operators: convolution, pooling, softmax, layer normalization,
//! Maxout and pairwise rotation.

use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, lane_dot, lane_max, lane_sum, lane_sum_sq, Scalar, Tensor, View};

const LAYER_NORM_EPS: f64 = 1e-5;

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn pad_rows<T: Scalar>(x: &Tensor<T>, padding: usize) -> Tensor<T> {
    let c = x.cols();
    let mut data = vec![T::zero(); (x.rows() + 2 * padding) * c];
    data[padding * c..(padding + x.rows()) * c].copy_from_slice(x.data());
    Tensor::new(x.rows() + 2 * padding, c, data)
}

/// im2col of a time-major signal as a zero-copy strided view: row `t` is the
/// contiguous run of `kernel * channels` values starting at frame `t * stride`.
fn im2col<T: Scalar>(xp: &Tensor<T>, kernel: usize, stride: usize, out_len: usize) -> View<'_, T> {
    let c = xp.cols();
    View {
        data: xp.data(),
        rows: out_len,
        cols: kernel * c,
        rs: stride * c,
        cs: 1,
    }
}

pub(super) fn avg_pool_rows<T: Scalar>(x: &Tensor<T>, win: usize, hop: usize) -> Tensor<T> {
    let (n, c) = (x.rows(), x.cols());
    let frames = 1 + (n - win) / hop;
    let g = gcd(win, hop);
    let (w, h) = (win / g, hop / g);
    let blocks = ((frames - 1) * hop + win) / g;
    let mut bs = vec![T::zero(); blocks * c];
    for b in 0..blocks {
        let acc = &mut bs[b * c..(b + 1) * c];
        for r in b * g..(b + 1) * g {
            for (a, &v) in acc.iter_mut().zip(x.row_slice(r)) {
                *a += v;
            }
        }
    }
    let scale = T::one() / T::of(win as f64);
    let mut out = Tensor::zeros(frames, c);
    for t in 0..frames {
        let row = &mut out.data_mut()[t * c..(t + 1) * c];
        for b in t * h..t * h + w {
            for (o, &v) in row.iter_mut().zip(&bs[b * c..(b + 1) * c]) {
                *o += v;
            }
        }
        row.iter_mut().for_each(|o| *o *= scale);
    }
    out
}

pub(super) fn avg_pool_rows_backward<T: Scalar>(
    gy: &Tensor<T>,
    n: usize,
    win: usize,
    hop: usize,
) -> Tensor<T> {
    let (frames, c) = (gy.rows(), gy.cols());
    let g = gcd(win, hop);
    let (w, h) = (win / g, hop / g);
    let blocks = ((frames - 1) * hop + win) / g;
    let scale = T::one() / T::of(win as f64);
    let mut gb = vec![T::zero(); blocks * c];
    for t in 0..frames {
        for b in t * h..t * h + w {
            for (a, &v) in gb[b * c..(b + 1) * c].iter_mut().zip(gy.row_slice(t)) {
                *a += v * scale;
            }
        }
    }
    let mut dx = Tensor::zeros(n, c);
    for b in 0..blocks {
        let src = &gb[b * c..(b + 1) * c];
        for r in b * g..(b + 1) * g {
            dx.data_mut()[r * c..(r + 1) * c].copy_from_slice(src);
        }
    }
    dx
}

/// Below this shifted logit a softmax weight (under 5e-18 of the row maximum)
/// is set to exactly zero. Left in, such weights end up subnormal in f32
/// and every later product with them is an order of magnitude slower.
const SOFTMAX_FLOOR: f64 = -40.0;

/// Softmax of one row, in place.
pub(super) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = lane_max(row);
    let floor = T::of(SOFTMAX_FLOOR);
    for v in row.iter_mut() {
        let d = *v - m;
        *v = if d < floor { T::zero() } else { d.exp_fast() };
    }
    let inv = lane_sum(row).recip();
    row.iter_mut().for_each(|v| *v *= inv);
}

pub(super) fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(x.cols()) {
        softmax_in_place(row);
    }
    out
}

pub(super) fn softmax_rows_backward<T: Scalar>(y: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let c = y.cols();
    let mut dx = Tensor::zeros(y.rows(), c);
    for ((d, yr), gr) in dx
        .data_mut()
        .chunks_mut(c)
        .zip(y.data().chunks(c))
        .zip(gy.data().chunks(c))
    {
        let dot = lane_dot(yr, gr);
        for ((o, &yi), &gi) in d.iter_mut().zip(yr).zip(gr) {
            *o = yi * (gi - dot);
        }
    }
    dx
}

/// Rotates each `(x[2i], x[2i+1])` pair of row `t` by the angle whose cosine
/// and sine are `cos[t][i]`, `sin[t][i]`; `inverse` rotates the other way.
pub(crate) fn rotate_pairs<T: Scalar>(
    x: &Tensor<T>,
    cos: &Tensor<T>,
    sin: &Tensor<T>,
    inverse: bool,
) -> Tensor<T> {
    let half = x.cols() / 2;
    let mut out = x.clone();
    for t in 0..x.rows() {
        let row = &mut out.data_mut()[t * x.cols()..(t + 1) * x.cols()];
        for i in 0..half {
            let (c, mut s) = (cos.get(t, i), sin.get(t, i));
            if inverse {
                s = -s;
            }
            let (a, b) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = a * c - b * s;
            row[2 * i + 1] = a * s + b * c;
        }
    }
    out
}

impl<T: Scalar> Graph<T> {
    /// 1-D convolution over the rows (time axis) of `x: [T x C_in]`.
    ///
    /// `w` is `[K * C_in x C_out]`, row `k * C_in + i` holding tap `k` of
    /// input channel `i` (cross-correlation convention). Zero padding of
    /// `padding` frames is applied at both ends.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let cin = sx[1];
        let shape_err = Error::Shape {
            op: "conv1d",
            lhs: sx,
            rhs: sw,
        };
        if stride == 0 || cin == 0 || sw[0] % cin != 0 {
            return Err(shape_err);
        }
        let kernel = sw[0] / cin;
        if sx[0] + 2 * padding < kernel {
            return Err(shape_err);
        }
        let out_len = (sx[0] + 2 * padding - kernel) / stride + 1;
        let mut value = Tensor::zeros(out_len, sw[1]);
        {
            let padded;
            let xp = if padding > 0 {
                padded = pad_rows(self.value(x), padding);
                &padded
            } else {
                self.value(x)
            };
            gemm(
                im2col(xp, kernel, stride, out_len),
                self.value(w).view(),
                T::zero(),
                value.data_mut(),
            );
        }
        Ok(self.push(
            value,
            Op::Conv1d {
                x,
                w,
                stride,
                padding,
            },
            &[x, w],
        ))
    }

    pub(super) fn conv1d_backward(
        &self,
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
        gy: &Tensor<T>,
    ) -> Vec<(Var, Tensor<T>)> {
        let (xv, wv) = (self.value(x), self.value(w));
        let cin = xv.cols();
        let kernel = wv.rows() / cin;
        let out_len = gy.rows();
        let padded;
        let xp = if padding > 0 {
            padded = pad_rows(xv, padding);
            &padded
        } else {
            xv
        };
        let mut out = Vec::new();
        if self.needs(w) {
            let mut gw = Tensor::zeros(wv.rows(), wv.cols());
            gemm(
                im2col(xp, kernel, stride, out_len).t(),
                gy.view(),
                T::zero(),
                gw.data_mut(),
            );
            out.push((w, gw));
        }
        if self.needs(x) {
            // Input gradient is the full correlation of `gy` with the flipped
            // kernel: form gy W^T per output frame, then overlap-add (col2im).
            let span = kernel * cin;
            let mut dcols = vec![T::zero(); out_len * span];
            gemm(gy.view(), wv.view().t(), T::zero(), &mut dcols);
            let mut dxp = vec![T::zero(); xp.len()];
            for (t, chunk) in dcols.chunks(span).enumerate() {
                let base = t * stride * cin;
                for (d, &v) in dxp[base..base + span].iter_mut().zip(chunk) {
                    *d += v;
                }
            }
            let dx = dxp[padding * cin..(padding + xv.rows()) * cin].to_vec();
            out.push((x, Tensor::new(xv.rows(), cin, dx)));
        }
        out
    }

    /// Average pooling over rows with window `win` and stride `hop`;
    /// produces `1 + (rows - win) / hop` frames.
    pub fn avg_pool_rows(&mut self, x: Var, win: usize, hop: usize) -> Result<Var> {
        let s = self.shape(x);
        if win == 0 || hop == 0 || s[0] < win {
            return Err(Error::Shape {
                op: "avg_pool_rows",
                lhs: s,
                rhs: [win, hop],
            });
        }
        let value = avg_pool_rows(self.value(x), win, hop);
        Ok(self.push(value, Op::AvgPoolRows { x, win, hop }, &[x]))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = softmax_rows(self.value(x));
        self.push(value, Op::SoftmaxRows(x), &[x])
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// `[1 x cols]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let s = self.shape(x);
        for p in [gain, bias] {
            if self.shape(p) != [1, s[1]] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: s,
                    rhs: self.shape(p),
                });
            }
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let n = T::of(s[1] as f64);
        let eps = T::of(LAYER_NORM_EPS);
        let mut xhat = Tensor::zeros(s[0], s[1]);
        let mut value = Tensor::zeros(s[0], s[1]);
        let mut inv_std = Vec::with_capacity(s[0]);
        let rows = xv
            .data()
            .chunks_exact(s[1])
            .zip(xhat.data_mut().chunks_exact_mut(s[1]))
            .zip(value.data_mut().chunks_exact_mut(s[1]));
        for ((row, h), y) in rows {
            let mu = lane_sum(row) / n;
            for (h, &v) in h.iter_mut().zip(row) {
                *h = v - mu;
            }
            let var = lane_sum_sq(h) / n;
            let is = (var + eps).sqrt().recip();
            inv_std.push(is);
            for (((y, h), &g), &b) in y.iter_mut().zip(h.iter_mut()).zip(gv).zip(bv) {
                *h *= is;
                *y = *h * g + b;
            }
        }
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    pub(super) fn layer_norm_backward(
        &self,
        x: Var,
        gain: Var,
        bias: Var,
        xhat: &Tensor<T>,
        inv_std: &[T],
        gy: &Tensor<T>,
    ) -> Vec<(Var, Tensor<T>)> {
        let [rows, cols] = xhat.shape();
        let gv = self.value(gain).data();
        let mut out = Vec::new();
        if self.needs(gain) || self.needs(bias) {
            let mut gg = Tensor::zeros(1, cols);
            let mut gb = Tensor::zeros(1, cols);
            for (g, h) in gy
                .data()
                .chunks_exact(cols)
                .zip(xhat.data().chunks_exact(cols))
            {
                for ((a, &gi), &hi) in gg.data_mut().iter_mut().zip(g).zip(h) {
                    *a += gi * hi;
                }
                for (b, &gi) in gb.data_mut().iter_mut().zip(g) {
                    *b += gi;
                }
            }
            if self.needs(gain) {
                out.push((gain, gg));
            }
            if self.needs(bias) {
                out.push((bias, gb));
            }
        }
        if self.needs(x) {
            let n = T::of(cols as f64);
            let mut dx = Tensor::zeros(rows, cols);
            let mut dh = vec![T::zero(); cols];
            let it = dx
                .data_mut()
                .chunks_exact_mut(cols)
                .zip(gy.data().chunks_exact(cols))
                .zip(xhat.data().chunks_exact(cols))
                .zip(inv_std);
            for (((d, g), h), &is) in it {
                for ((o, &gi), &w) in dh.iter_mut().zip(g).zip(gv) {
                    *o = gi * w;
                }
                let sum_dh = lane_sum(&dh);
                let sum_dh_h = lane_dot(&dh, h);
                let k = is / n;
                for ((o, &di), &hi) in d.iter_mut().zip(&dh).zip(h) {
                    *o = k * (n * di - sum_dh - hi * sum_dh_h);
                }
            }
            out.push((x, dx));
        }
        out
    }

    /// Maximum over each group of `pieces` adjacent columns:
    /// `[R x G*pieces] -> [R x G]`. Ties go to the lowest index.
    pub fn maxout(&mut self, x: Var, pieces: usize) -> Result<Var> {
        let s = self.shape(x);
        if pieces == 0 || !s[1].is_multiple_of(pieces) {
            return Err(Error::Shape {
                op: "maxout",
                lhs: s,
                rhs: [1, pieces],
            });
        }
        let groups = s[1] / pieces;
        let xv = self.value(x);
        let data: Vec<T> = xv
            .data()
            .chunks_exact(pieces)
            .map(|c| c[1..].iter().fold(c[0], |m, &v| if v > m { v } else { m }))
            .collect();
        // Winner indices are only needed by the backward pass.
        let winners = if self.needs(x) {
            xv.data()
                .chunks_exact(pieces)
                .map(|c| {
                    (1..pieces).fold(0, |best, i| if c[i] > c[best] { i } else { best }) as u32
                })
                .collect()
        } else {
            Vec::new()
        };
        let value = Tensor::new(s[0], groups, data);
        Ok(self.push(value, Op::Maxout { x, pieces, winners }, &[x]))
    }

    pub(super) fn maxout_backward(
        &self,
        x: Var,
        pieces: usize,
        winners: &[u32],
        gy: &Tensor<T>,
    ) -> Vec<(Var, Tensor<T>)> {
        let [r, c] = self.shape(x);
        let mut dx = Tensor::zeros(r, c);
        for (j, (&g, &w)) in gy.data().iter().zip(winners).enumerate() {
            dx.data_mut()[j * pieces + w as usize] = g;
        }
        vec![(x, dx)]
    }

    /// Rotates coordinate pairs `(2i, 2i+1)` of each row; `cos` and `sin`
    /// are `[rows x cols/2]` tables of the per-row, per-pair angles.
    pub fn rotate_pairs(&mut self, x: Var, cos: Tensor<T>, sin: Tensor<T>) -> Result<Var> {
        let s = self.shape(x);
        if !s[1].is_multiple_of(2) || cos.shape() != [s[0], s[1] / 2] || sin.shape() != cos.shape()
        {
            return Err(Error::Shape {
                op: "rotate_pairs",
                lhs: s,
                rhs: cos.shape(),
            });
        }
        let value = rotate_pairs(self.value(x), &cos, &sin, false);
        Ok(self.push(value, Op::RotatePairs { x, cos, sin }, &[x]))
    }
}
