use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

type G = Graph<f64>;

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
    Tensor::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

/// Central-difference gradient check of `f` (which maps leaves to a scalar)
/// at `inputs`; returns the worst normwise relative error over the inputs.
fn fd_check(inputs: &[Tensor<f64>], f: impl Fn(&mut G, &[Var]) -> Var) -> f64 {
    let eval = |vals: &[Tensor<f64>]| {
        let mut g = G::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };
    let mut g = G::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.backward(out).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).cloned().unwrap_or_else(|| {
            let [r, c] = inputs[k].shape();
            Tensor::zeros(r, c)
        });
        let mut num = Vec::new();
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            num.push((eval(&plus) - eval(&minus)) / (2.0 * h));
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&num)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = analytic
            .norm()
            .max(num.iter().map(|n| n * n).sum::<f64>().sqrt());
        if scale > 1e-12 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

/// Weighted sum with fixed random weights so every output element matters.
fn probe(g: &mut G, y: Var, seed: u64) -> Var {
    let [r, c] = g.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(rand_tensor(&mut rng, r, c));
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

#[test]
fn matmul_shape_rule_and_error() {
    let mut g = G::new();
    let a = g.constant(Tensor::zeros(2, 3));
    let b = g.constant(Tensor::zeros(3, 4));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(c), [2, 4]);
    let err = g.matmul(b, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[3, 4]"), "{err}");
}

#[test]
fn softmax_of_constant_row_is_uniform() {
    let mut g = G::new();
    let x = g.constant(Tensor::row(vec![1.0, 1.0, 1.0]));
    let y = g.softmax_rows(x);
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn conv1d_same_padding_keeps_length() {
    let mut g = G::new();
    let x = g.constant(Tensor::col(vec![1.0, 2.0, 3.0, 4.0, 5.0]));
    let w = g.constant(Tensor::col(vec![1.0, 0.0, -1.0]));
    let y = g.conv1d(x, w, 1, 1).unwrap();
    assert_eq!(g.shape(y), [5, 1]);
    // y[t] = x[t-1] - x[t+1]
    assert_eq!(g.value(y).data(), &[-2.0, -2.0, -2.0, -2.0, 4.0]);
}

#[test]
fn conv1d_stride_and_valid_padding() {
    let mut g = G::new();
    let x = g.constant(Tensor::col((0..7).map(f64::from).collect()));
    let w = g.constant(Tensor::col(vec![1.0, 1.0, 1.0]));
    let y = g.conv1d(x, w, 2, 0).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 9.0, 15.0]);
    let long = g.constant(Tensor::zeros(8, 1));
    assert!(g.conv1d(x, long, 1, 0).is_err());
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = G::new();
    let x = g.param(Tensor::from_fn(3, 2, |r, c| (r + c) as f64));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn backward_of_mse_at_minimum_is_zero() {
    let mut g = G::new();
    let x = g.param(Tensor::row(vec![0.3, -0.2, 0.9]));
    let y = g.constant(Tensor::row(vec![0.3, -0.2, 0.9]));
    let d = g.sub(x, y).unwrap();
    let d2 = g.square(d);
    let l = g.mean(d2);
    g.backward(l).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = G::new();
    let x = g.param(Tensor::zeros(2, 2));
    assert!(g.backward(x).is_err());
}

#[test]
fn repeated_backward_accumulates_until_reset() {
    let mut g = G::new();
    let x = g.param(Tensor::row(vec![1.0, 2.0]));
    let s = g.square(x);
    let l = g.sum(s);
    g.backward(l).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[4.0, 8.0]);
    g.zero_grad();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn diamond_graph_accumulates_both_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, 3, 3);
    let err = fd_check(&[x], |g, v| {
        let a = g.sin(v[0]);
        let b = g.square(v[0]);
        let c = g.mul(a, b).unwrap();
        let d = g.matmul(c, v[0]).unwrap();
        g.sum(d)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn maxout_single_piece_is_identity() {
    let mut g = G::new();
    let x = g.param(Tensor::row(vec![0.5, -1.0, 2.0]));
    let y = g.maxout(x, 1).unwrap();
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn maxout_routes_gradient_to_winner() {
    let mut g = G::new();
    let x = g.param(Tensor::row(vec![2.0, -1.0]));
    let y = g.maxout(x, 2).unwrap();
    assert_eq!(g.value(y).data(), &[2.0]);
    let l = g.sum(y);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0]);
}

#[test]
fn maxout_tie_goes_to_lowest_index() {
    let mut g = G::new();
    let x = g.param(Tensor::row(vec![0.7, 0.7, 0.7, -3.0, 5.0, 5.0]));
    let y = g.maxout(x, 3).unwrap();
    let l = g.sum(y);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
}

#[test]
fn maxout_rejects_indivisible_width() {
    let mut g = G::new();
    let x = g.param(Tensor::zeros(2, 5));
    assert!(g.maxout(x, 2).is_err());
}

#[test]
fn broadcast_add_reduces_gradient() {
    let mut g = G::new();
    let x = g.param(Tensor::zeros(4, 3));
    let b = g.param(Tensor::row(vec![1.0, 2.0, 3.0]));
    let y = g.add(x, b).unwrap();
    let l = g.sum(y);
    g.backward(l).unwrap();
    assert_eq!(g.grad(b).unwrap().data(), &[4.0, 4.0, 4.0]);
    let bad = g.param(Tensor::zeros(2, 3));
    assert!(g.add(x, bad).is_err());
}

#[test]
fn avg_pool_frames_and_values() {
    let mut g = G::new();
    let x = g.constant(Tensor::col((0..10).map(f64::from).collect()));
    let y = g.avg_pool_rows(x, 4, 2).unwrap();
    assert_eq!(g.value(y).data(), &[1.5, 3.5, 5.5, 7.5]);
}

#[test]
fn layer_norm_rows_are_standardized() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = G::new();
    let x = g.constant(rand_tensor(&mut rng, 5, 8));
    let one = g.constant(Tensor::full(1, 8, 1.0));
    let zero = g.constant(Tensor::zeros(1, 8));
    let y = g.layer_norm(x, one, zero).unwrap();
    for r in 0..5 {
        let row = g.value(y).row_slice(r);
        let mean: f64 = row.iter().sum::<f64>() / 8.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn forward_is_bit_reproducible() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = G::new();
        let x = g.constant(rand_tensor(&mut rng, 40, 16));
        let w = g.constant(rand_tensor(&mut rng, 48, 32));
        let y = g.conv1d(x, w, 1, 1).unwrap();
        let z = g.softmax_rows(y);
        g.value(z).clone()
    };
    assert_eq!(run().data(), run().data());
}

/// Every operator against central differences on small random instances.
#[test]
fn operators_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for trial in 0..3u64 {
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 4, 2);
        let c = rand_tensor(&mut rng, 3, 4);
        let row = rand_tensor(&mut rng, 1, 4);
        let pos = a.map(|v| v.abs() + 0.5);
        let sig = rand_tensor(&mut rng, 9, 2);
        let ker = rand_tensor(&mut rng, 6, 3);
        let checks: Vec<(&str, f64)> = vec![
            (
                "matmul",
                fd_check(&[a.clone(), b.clone()], |g, v| {
                    let y = g.matmul(v[0], v[1]).unwrap();
                    probe(g, y, trial)
                }),
            ),
            (
                "add/broadcast",
                fd_check(&[a.clone(), row.clone()], |g, v| {
                    let y = g.add(v[0], v[1]).unwrap();
                    probe(g, y, trial)
                }),
            ),
            (
                "sub",
                fd_check(&[a.clone(), c.clone()], |g, v| {
                    let y = g.sub(v[0], v[1]).unwrap();
                    probe(g, y, trial)
                }),
            ),
            (
                "mul/broadcast",
                fd_check(&[a.clone(), row.clone()], |g, v| {
                    let y = g.mul(v[0], v[1]).unwrap();
                    probe(g, y, trial)
                }),
            ),
            (
                "scalar",
                fd_check(std::slice::from_ref(&a), |g, v| {
                    let y = g.mul_scalar(v[0], -1.7);
                    let y = g.add_scalar(y, 0.3);
                    probe(g, y, trial)
                }),
            ),
            (
                "abs",
                fd_check(std::slice::from_ref(&a), |g, v| {
                    let y = g.abs(v[0]);
                    probe(g, y, trial)
                }),
            ),
            (
                "square",
                fd_check(std::slice::from_ref(&a), |g, v| {
                    let y = g.square(v[0]);
                    probe(g, y, trial)
                }),
            ),
            (
                "sigmoid",
                fd_check(std::slice::from_ref(&a), |g, v| {
                    let y = g.sigmoid(v[0]);
                    probe(g, y, trial)
                }),
            ),
            (
                "ln",
                fd_check(std::slice::from_ref(&pos), |g, v| {
                    let y = g.ln(v[0]);
                    probe(g, y, trial)
                }),
            ),
            (
                "sin",
                fd_check(std::slice::from_ref(&a), |g, v| {
                    let y = g.sin(v[0]);
                    probe(g, y, trial)
                }),
            ),
            (
                "relu",
                fd_check(std::slice::from_ref(&a), |g, v| {
                    let y = g.relu(v[0]);
                    probe(g, y, trial)
                }),
            ),
            (
                "leaky_relu",
                fd_check(std::slice::from_ref(&a), |g, v| {
                    let y = g.leaky_relu(v[0], 0.01);
                    probe(g, y, trial)
                }),
            ),
            (
                "prelu",
                fd_check(&[a.clone(), Tensor::scalar(0.25)], |g, v| {
                    let y = g.prelu(v[0], v[1]).unwrap();
                    probe(g, y, trial)
                }),
            ),
            (
                "clamp_max",
                fd_check(std::slice::from_ref(&a), |g, v| {
                    let y = g.clamp_max(v[0], 0.1);
                    probe(g, y, trial)
                }),
            ),
            (
                "maxout",
                fd_check(std::slice::from_ref(&a), |g, v| {
                    let y = g.maxout(v[0], 2).unwrap();
                    probe(g, y, trial)
                }),
            ),
            (
                "softmax",
                fd_check(std::slice::from_ref(&a), |g, v| {
                    let y = g.softmax_rows(v[0]);
                    probe(g, y, trial)
                }),
            ),
            (
                "mean",
                fd_check(std::slice::from_ref(&a), |g, v| {
                    let y = g.square(v[0]);
                    g.mean(y)
                }),
            ),
            (
                "transpose/reshape",
                fd_check(std::slice::from_ref(&a), |g, v| {
                    let y = g.transpose(v[0]);
                    let y = g.reshape(y, 2, 6).unwrap();
                    probe(g, y, trial)
                }),
            ),
            (
                "slice/concat",
                fd_check(&[a.clone(), c.clone()], |g, v| {
                    let s1 = g.slice_cols(v[0], 1, 2).unwrap();
                    let s2 = g.slice_rows(v[1], 0, 3).unwrap();
                    let s2 = g.slice_cols(s2, 0, 3).unwrap();
                    let y = g.concat_cols(&[s1, s2]).unwrap();
                    let y = g.concat_rows(&[y, y]).unwrap();
                    probe(g, y, trial)
                }),
            ),
            (
                "conv1d",
                fd_check(&[sig.clone(), ker.clone()], |g, v| {
                    let y = g.conv1d(v[0], v[1], 2, 1).unwrap();
                    probe(g, y, trial)
                }),
            ),
            (
                "avg_pool",
                fd_check(std::slice::from_ref(&sig), |g, v| {
                    let y = g.avg_pool_rows(v[0], 4, 2).unwrap();
                    probe(g, y, trial)
                }),
            ),
            (
                "layer_norm",
                fd_check(&[a.clone(), row.clone(), row.clone()], |g, v| {
                    let y = g.layer_norm(v[0], v[1], v[2]).unwrap();
                    probe(g, y, trial)
                }),
            ),
            (
                "fir_abs_pool",
                fd_check(
                    &[rand_tensor(&mut rng, 23, 1), rand_tensor(&mut rng, 3, 3)],
                    |g, v| {
                        let y = g.fir_abs_pool(v[0], v[1], 6, 4).unwrap();
                        probe(g, y, trial)
                    },
                ),
            ),
            (
                "attention",
                fd_check(
                    &[
                        rand_tensor(&mut rng, 5, 4),
                        rand_tensor(&mut rng, 5, 4),
                        rand_tensor(&mut rng, 5, 4),
                    ],
                    |g, v| {
                        let y = g.multi_head_attention(v[0], v[1], v[2], 2).unwrap();
                        probe(g, y, trial)
                    },
                ),
            ),
            (
                "rotate_pairs",
                fd_check(std::slice::from_ref(&a), |g, v| {
                    let ang = Tensor::from_fn(3, 2, |r, c| 0.3 * r as f64 + c as f64);
                    let y = g
                        .rotate_pairs(v[0], ang.map(f64::cos), ang.map(f64::sin))
                        .unwrap();
                    probe(g, y, trial)
                }),
            ),
        ];
        for (name, err) in checks {
            assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }
}

/// Full `[C x (2h+1)]` kernels from their `[C x (h+1)]` left halves.
fn mirror(half: &Tensor<f64>) -> Tensor<f64> {
    let h = half.cols() - 1;
    Tensor::from_fn(half.rows(), 2 * h + 1, |r, j| {
        half.get(r, if j <= h { j } else { 2 * h - j })
    })
}

#[test]
fn fir_abs_pool_matches_unfused_pipeline() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for &(n, c, h, win, hop) in &[
        (5000, 3, 6, 400, 160),
        (37, 2, 2, 8, 3),
        (4100, 4, 0, 100, 100),
    ] {
        let x = rand_tensor(&mut rng, n, 1);
        let half = rand_tensor(&mut rng, c, h + 1);
        let gy = rand_tensor(&mut rng, 1 + (n - win) / hop, c);

        let mut g = G::new();
        let (xs, hs) = (g.param(x.clone()), g.param(half.clone()));
        let fused = g.fir_abs_pool(xs, hs, win, hop).unwrap();
        let w = g.constant(gy.clone());
        let p = g.mul(fused, w).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();

        let mut r = G::new();
        let (xr, kr) = (r.param(x.clone()), r.param(mirror(&half)));
        let taps = r.transpose(kr);
        let y = r.conv1d(xr, taps, 1, h).unwrap();
        let y = r.abs(y);
        let reference = r.avg_pool_rows(y, win, hop).unwrap();
        let w = r.constant(gy);
        let p = r.mul(reference, w).unwrap();
        let l = r.sum(p);
        r.backward(l).unwrap();

        let close = |a: &Tensor<f64>, b: &Tensor<f64>| {
            assert_eq!(a.shape(), b.shape());
            a.data()
                .iter()
                .zip(b.data())
                .all(|(u, v)| (u - v).abs() <= 1e-10 * (1.0 + v.abs()))
        };
        assert!(close(g.value(fused), r.value(reference)), "value n={n}");
        assert!(
            close(g.grad(xs).unwrap(), r.grad(xr).unwrap()),
            "signal grad n={n}"
        );
        // The mirrored taps of the reference each receive part of the gradient.
        let gk = r.grad(kr).unwrap();
        let folded = Tensor::from_fn(c, h + 1, |ci, j| {
            if j < h {
                gk.get(ci, j) + gk.get(ci, 2 * h - j)
            } else {
                gk.get(ci, j)
            }
        });
        assert!(close(g.grad(hs).unwrap(), &folded), "kernel grad n={n}");
    }
}

#[test]
fn fused_attention_matches_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (t, d, heads) = (7, 6, 3);
    let (q, k, v) = (
        rand_tensor(&mut rng, t, d),
        rand_tensor(&mut rng, t, d),
        rand_tensor(&mut rng, t, d),
    );
    let gy = rand_tensor(&mut rng, t, d);

    let mut g = G::new();
    let vars: Vec<Var> = [&q, &k, &v].iter().map(|x| g.param((*x).clone())).collect();
    let y = g
        .multi_head_attention(vars[0], vars[1], vars[2], heads)
        .unwrap();
    let w = g.constant(gy.clone());
    let p = g.mul(y, w).unwrap();
    let l = g.sum(p);
    g.backward(l).unwrap();

    let mut r = G::new();
    let rv: Vec<Var> = [&q, &k, &v].iter().map(|x| r.param((*x).clone())).collect();
    let dh = d / heads;
    let mut outs = Vec::new();
    for h in 0..heads {
        let qh = r.slice_cols(rv[0], h * dh, dh).unwrap();
        let kh = r.slice_cols(rv[1], h * dh, dh).unwrap();
        let vh = r.slice_cols(rv[2], h * dh, dh).unwrap();
        let kt = r.transpose(kh);
        let s = r.matmul(qh, kt).unwrap();
        let a = r.softmax_rows(s);
        let weights = &g.attention_weights(y).unwrap()[h];
        for (x, y) in weights.data().iter().zip(r.value(a).data()) {
            assert!((x - y).abs() < 1e-12);
        }
        outs.push(r.matmul(a, vh).unwrap());
    }
    let yr = r.concat_cols(&outs).unwrap();
    let w = r.constant(gy);
    let p = r.mul(yr, w).unwrap();
    let l = r.sum(p);
    r.backward(l).unwrap();

    for (a, b) in g.value(y).data().iter().zip(r.value(yr).data()) {
        assert!((a - b).abs() < 1e-12);
    }
    for (gv, rv) in vars.iter().zip(&rv) {
        for (a, b) in g
            .grad(*gv)
            .unwrap()
            .data()
            .iter()
            .zip(r.grad(*rv).unwrap().data())
        {
            assert!((a - b).abs() < 1e-12);
        }
    }
    assert!(g.attention_weights(vars[0]).is_none());
}
