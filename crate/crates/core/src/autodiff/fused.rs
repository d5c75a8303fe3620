//! Fused operators for the two hot spots of the network. Both work block by
//! block so that no large intermediate is kept for the backward pass.

use super::{sign, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_into, lane_dot, Scalar, Tensor, View};

/// Signal samples processed per block by [`Graph::fir_abs_pool`].
const FIR_BLOCK: usize = 2048;

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Geometry shared by the forward and backward passes of `fir_abs_pool`.
struct FirPlan {
    n: usize,
    half: usize,
    channels: usize,
    frames: usize,
    win: usize,
    hop: usize,
    seg: usize,
    segments: usize,
    block: usize,
}

impl FirPlan {
    fn new(n: usize, taps: usize, channels: usize, win: usize, hop: usize) -> Self {
        let frames = 1 + (n - win) / hop;
        let seg = gcd(win, hop);
        let segments = ((frames - 1) * hop + win) / seg;
        FirPlan {
            n,
            half: taps - 1,
            channels,
            frames,
            win,
            hop,
            seg,
            segments,
            block: seg * (FIR_BLOCK / seg).max(1),
        }
    }

    fn used(&self) -> usize {
        self.segments * self.seg
    }

    fn padded<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let mut xp = vec![T::zero(); self.n + 2 * self.half];
        xp[self.half..self.half + self.n].copy_from_slice(x);
        xp
    }

    /// Folded taps of samples `start..start + rows`: column `j < h` holds
    /// `xp[n + j] + xp[n + 2h - j]`, column `h` holds `xp[n + h]`.
    fn fold<T: Scalar>(&self, xp: &[T], start: usize, rows: usize, out: &mut [T]) {
        let h = self.half;
        for (r, row) in out.chunks_exact_mut(h + 1).take(rows).enumerate() {
            let w = &xp[start + r..start + r + 2 * h + 1];
            for (j, o) in row[..h].iter_mut().enumerate() {
                *o = w[j] + w[2 * h - j];
            }
            row[h] = w[h];
        }
    }

    /// Filtered block `[rows x C] = folded * half^T` into `y`.
    fn filter<T: Scalar>(&self, folded: &[T], rows: usize, half: &Tensor<T>, y: &mut [T]) {
        let k = self.half + 1;
        gemm(
            View::dense(&folded[..rows * k], rows, k),
            half.view().t(),
            T::zero(),
            &mut y[..rows * self.channels],
        );
    }

    /// Segment index range `[first, last)` covered by frame `f`.
    fn frame_segments(&self, f: usize) -> std::ops::Range<usize> {
        let first = f * self.hop / self.seg;
        first..first + self.win / self.seg
    }
}

/// Per-head state kept by the attention operator.
pub(crate) struct AttentionCache<T> {
    pub heads: usize,
    /// Attention weights `[T x T]` per head.
    pub weights: Vec<Tensor<T>>,
}

/// Column block `h` of a `[rows x d]` matrix as a strided view.
fn head_view<T>(data: &[T], rows: usize, d: usize, dh: usize, h: usize) -> View<'_, T> {
    View {
        data: &data[h * dh..],
        rows,
        cols: dh,
        rs: d,
        cs: 1,
    }
}

impl<T: Scalar> Graph<T> {
    /// Linear-phase FIR filterbank followed by rectification and average
    /// pooling: `avg_pool(|conv(signal, k)|, win, hop)`.
    ///
    /// `signal` is `[N x 1]`. Each filter `c` is symmetric with `2h + 1` taps;
    /// `half: [C x (h+1)]` holds taps at offsets `-h..=0`, the mirror image
    /// supplying the rest. The convolution is zero-padded to length `N`
    /// ("same"). The output is `[1 + (N - win) / hop  x  C]`.
    pub fn fir_abs_pool(&mut self, signal: Var, half: Var, win: usize, hop: usize) -> Result<Var> {
        let (ss, sh) = (self.shape(signal), self.shape(half));
        if ss[1] != 1 || sh[1] == 0 || sh[0] == 0 || win == 0 || hop == 0 || ss[0] < win {
            return Err(Error::Shape {
                op: "fir_abs_pool",
                lhs: ss,
                rhs: sh,
            });
        }
        let plan = FirPlan::new(ss[0], sh[1], sh[0], win, hop);
        let c = plan.channels;
        let hv = self.value(half);
        let xp = plan.padded(self.value(signal).data());
        let mut folded = vec![T::zero(); plan.block * (plan.half + 1)];
        let mut y = vec![T::zero(); plan.block * c];
        let mut seg_sums = vec![T::zero(); plan.segments * c];
        let used = plan.used();
        for start in (0..used).step_by(plan.block) {
            let rows = plan.block.min(used - start);
            plan.fold(&xp, start, rows, &mut folded);
            plan.filter(&folded, rows, hv, &mut y);
            for (r, yr) in y[..rows * c].chunks_exact(c).enumerate() {
                let s = (start + r) / plan.seg;
                for (a, &v) in seg_sums[s * c..(s + 1) * c].iter_mut().zip(yr) {
                    *a += v.abs();
                }
            }
        }
        let scale = T::one() / T::of(win as f64);
        let mut value = Tensor::zeros(plan.frames, c);
        for (f, row) in value.data_mut().chunks_exact_mut(c).enumerate() {
            for s in plan.frame_segments(f) {
                for (o, &v) in row.iter_mut().zip(&seg_sums[s * c..(s + 1) * c]) {
                    *o += v;
                }
            }
            row.iter_mut().for_each(|o| *o *= scale);
        }
        Ok(self.push(
            value,
            Op::FirAbsPool {
                signal,
                half,
                win,
                hop,
            },
            &[signal, half],
        ))
    }

    pub(super) fn fir_abs_pool_backward(
        &self,
        signal: Var,
        half: Var,
        win: usize,
        hop: usize,
        gy: &Tensor<T>,
    ) -> Vec<(Var, Tensor<T>)> {
        let hv = self.value(half);
        let sv = self.value(signal);
        let plan = FirPlan::new(sv.rows(), hv.cols(), hv.rows(), win, hop);
        let (c, k) = (plan.channels, plan.half + 1);
        let scale = T::one() / T::of(win as f64);
        let mut seg_grad = vec![T::zero(); plan.segments * c];
        for (f, g) in gy.data().chunks_exact(c).enumerate() {
            for s in plan.frame_segments(f) {
                for (a, &v) in seg_grad[s * c..(s + 1) * c].iter_mut().zip(g) {
                    *a += v * scale;
                }
            }
        }
        let (need_half, need_signal) = (self.needs(half), self.needs(signal));
        let xp = plan.padded(sv.data());
        let mut folded = vec![T::zero(); plan.block * k];
        let mut y = vec![T::zero(); plan.block * c];
        let mut dfold = vec![T::zero(); if need_signal { plan.block * k } else { 0 }];
        let mut dhalf = Tensor::zeros(c, k);
        let mut dxp = vec![T::zero(); if need_signal { xp.len() } else { 0 }];
        let used = plan.used();
        for start in (0..used).step_by(plan.block) {
            let rows = plan.block.min(used - start);
            plan.fold(&xp, start, rows, &mut folded);
            plan.filter(&folded, rows, hv, &mut y);
            for (r, yr) in y[..rows * c].chunks_exact_mut(c).enumerate() {
                let s = (start + r) / plan.seg;
                for (v, &g) in yr.iter_mut().zip(&seg_grad[s * c..(s + 1) * c]) {
                    *v = sign(*v) * g;
                }
            }
            let dy = View::dense(&y[..rows * c], rows, c);
            if need_half {
                gemm(
                    dy.t(),
                    View::dense(&folded[..rows * k], rows, k),
                    T::one(),
                    dhalf.data_mut(),
                );
            }
            if need_signal {
                gemm(dy, hv.view(), T::zero(), &mut dfold[..rows * k]);
                let h = plan.half;
                for (r, d) in dfold[..rows * k].chunks_exact(k).enumerate() {
                    let w = &mut dxp[start + r..start + r + 2 * h + 1];
                    for (j, &v) in d[..h].iter().enumerate() {
                        w[j] += v;
                        w[2 * h - j] += v;
                    }
                    w[h] += d[h];
                }
            }
        }
        let mut out = Vec::new();
        if need_half {
            out.push((half, dhalf));
        }
        if need_signal {
            let dx = dxp[plan.half..plan.half + plan.n].to_vec();
            out.push((signal, Tensor::col(dx)));
        }
        out
    }

    /// Multi-head scaled-dot-product attention without masking. `q`, `k`,
    /// `v` are `[T x d]`; head `h` uses columns `h*d/heads..(h+1)*d/heads`.
    /// Queries are expected to be scaled already. Returns `[T x d]`, the
    /// head outputs side by side.
    pub fn multi_head_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let s = self.shape(q);
        if heads == 0 || !s[1].is_multiple_of(heads) || self.shape(k) != s || self.shape(v) != s {
            return Err(Error::Shape {
                op: "multi_head_attention",
                lhs: s,
                rhs: self.shape(k),
            });
        }
        let [t, d] = s;
        let dh = d / heads;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut value = Tensor::zeros(t, d);
        // The weights are only kept when the backward pass will need them.
        let keep = self.needs(q) || self.needs(k) || self.needs(v);
        let mut weights = Vec::with_capacity(if keep { heads } else { 0 });
        let mut p = Tensor::zeros(t, t);
        for h in 0..heads {
            gemm(
                head_view(qv.data(), t, d, dh, h),
                head_view(kv.data(), t, d, dh, h).t(),
                T::zero(),
                p.data_mut(),
            );
            for row in p.data_mut().chunks_exact_mut(t) {
                super::nn::softmax_in_place(row);
            }
            gemm_into(
                p.view(),
                head_view(vv.data(), t, d, dh, h),
                T::zero(),
                &mut value.data_mut()[h * dh..],
                d,
            );
            if keep {
                weights.push(p.clone());
            }
        }
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                cache: AttentionCache { heads, weights },
            },
            &[q, k, v],
        ))
    }

    pub(super) fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        cache: &AttentionCache<T>,
        gy: &Tensor<T>,
    ) -> Vec<(Var, Tensor<T>)> {
        let [t, d] = self.shape(q);
        let dh = d / cache.heads;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (nq, nk, nv) = (self.needs(q), self.needs(k), self.needs(v));
        let mut dq = Tensor::zeros(t, d);
        let mut dk = Tensor::zeros(t, d);
        let mut dv = Tensor::zeros(t, d);
        let mut ds = Tensor::zeros(t, t);
        for (h, p) in cache.weights.iter().enumerate() {
            let gh = head_view(gy.data(), t, d, dh, h);
            if nv {
                gemm_into(p.view().t(), gh, T::zero(), &mut dv.data_mut()[h * dh..], d);
            }
            if !(nq || nk) {
                continue;
            }
            gemm(
                gh,
                head_view(vv.data(), t, d, dh, h).t(),
                T::zero(),
                ds.data_mut(),
            );
            for (dr, pr) in ds
                .data_mut()
                .chunks_exact_mut(t)
                .zip(p.data().chunks_exact(t))
            {
                let dot = lane_dot(dr, pr);
                for (g, &pi) in dr.iter_mut().zip(pr) {
                    *g = pi * (*g - dot);
                }
            }
            if nq {
                gemm_into(
                    ds.view(),
                    head_view(kv.data(), t, d, dh, h),
                    T::zero(),
                    &mut dq.data_mut()[h * dh..],
                    d,
                );
            }
            if nk {
                gemm_into(
                    ds.view().t(),
                    head_view(qv.data(), t, d, dh, h),
                    T::zero(),
                    &mut dk.data_mut()[h * dh..],
                    d,
                );
            }
        }
        let mut out = Vec::new();
        if nq {
            out.push((q, dq));
        }
        if nk {
            out.push((k, dk));
        }
        if nv {
            out.push((v, dv));
        }
        out
    }

    /// Attention weights recorded by a [`Graph::multi_head_attention`] node,
    /// one `[T x T]` matrix per head. Empty when no input requires a gradient.
    pub fn attention_weights(&self, node: Var) -> Option<&[Tensor<T>]> {
        match &self.nodes[node.0].op {
            Op::Attention { cache, .. } => Some(&cache.weights),
            _ => None,
        }
    }
}
