//! Forward results against naive nested-loop oracles.

mod common;

use common::*;
use forge_autodiff::{NormPhase, RunningStats, Tape, Tensor, Var, BN_EPS, BN_MOMENTUM};
use proptest::prelude::*;
use rand::Rng;

fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Vec<f32> {
    let &[n, cin, h, wd] = x.shape() else { panic!() };
    let &[cout, _, kh, kw] = w.shape() else { panic!() };
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0f32; n * cout * ho * wo];
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0f32;
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((b * cin + ci) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((b * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

fn max_abs(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn run_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let mut t = Tape::new();
    let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
    let y = t.conv2d(xv, wv, stride, pad).unwrap();
    t.value(y).clone()
}

#[test]
fn conv2d_matches_nested_loops_spec_case() {
    let mut r = rng(1);
    let x = uniform(&[1, 2, 4, 4], &mut r);
    let w = uniform(&[3, 2, 3, 3], &mut r);
    let y = run_conv(&x, &w, 1, 1);
    assert_eq!(y.shape(), &[1, 3, 4, 4]);
    assert!(max_abs(y.data(), &naive_conv(&x, &w, 1, 1)) <= 1e-5);
}

#[test]
fn conv2d_matches_nested_loops_all_small_shapes() {
    let mut r = rng(2);
    let mut cases = 0;
    while cases < 150 {
        let dims: Vec<usize> = (0..6).map(|_| r.gen_range(1..=4)).collect();
        let (n, cin, h, w, cout, k) = (dims[0], dims[1], dims[2], dims[3], dims[4], dims[5]);
        let (stride, pad) = (r.gen_range(1..=3), r.gen_range(0..=2));
        if h + 2 * pad < k || w + 2 * pad < k {
            continue;
        }
        let x = uniform(&[n, cin, h, w], &mut r);
        let wt = uniform(&[cout, cin, k, k], &mut r);
        let y = run_conv(&x, &wt, stride, pad);
        let err = max_abs(y.data(), &naive_conv(&x, &wt, stride, pad));
        assert!(err <= 1e-5, "case {cases}: {err}");
        cases += 1;
    }
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(3);
    for case in 0..150 {
        let (m, k, n) = (r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(1..=4));
        let a = uniform(&[m, k], &mut r);
        let b = uniform(&[k, n], &mut r);
        let mut expect = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    expect[i * n + j] += a.data()[i * k + l] * b.data()[l * n + j];
                }
            }
        }
        let mut t = Tape::new();
        let (av, bv) = (t.constant(a), t.constant(b));
        let y = t.matmul(av, bv).unwrap();
        assert!(max_abs(t.value(y).data(), &expect) <= 1e-5, "case {case}");
    }
}

#[test]
fn global_avg_pool_matches_summation() {
    let mut r = rng(4);
    for case in 0..150 {
        let s: Vec<usize> = (0..4).map(|_| r.gen_range(1..=4)).collect();
        let x = uniform(&s, &mut r);
        let mut expect = Vec::new();
        for b in 0..s[0] {
            for c in 0..s[1] {
                let mut acc = 0.0f64;
                for i in 0..s[2] * s[3] {
                    acc += x.data()[(b * s[1] + c) * s[2] * s[3] + i] as f64;
                }
                expect.push((acc / (s[2] * s[3]) as f64) as f32);
            }
        }
        let mut t = Tape::new();
        let xv = t.constant(x);
        let y = t.global_avg_pool(xv).unwrap();
        assert!(max_abs(t.value(y).data(), &expect) <= 1e-6, "case {case}");
    }
}

#[test]
fn train_batch_norm_standardizes_each_channel() {
    let mut r = rng(5);
    let x = Tensor::uniform(&[4, 3, 5, 5], -3.0, 7.0, &mut r);
    let mut t = Tape::new();
    let xv = t.constant(x);
    let mut stats = RunningStats::new(3);
    let y = t.batch_norm2d(xv, &mut stats, NormPhase::Train, BN_MOMENTUM, BN_EPS).unwrap();
    let out = t.value(y).data();
    for c in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|b| out[(b * 3 + c) * 25..][..25].iter().map(|&v| v as f64)).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() <= 1e-4, "channel {c} mean {mean}");
        assert!((var - 1.0).abs() <= 1e-4, "channel {c} var {var}");
    }
}

#[test]
fn cross_entropy_matches_direct_softmax_log() {
    let mut r = rng(6);
    for _ in 0..20 {
        let z = Tensor::uniform(&[4, 5], -4.0, 4.0, &mut r);
        let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..5)).collect();
        let mut expect = 0.0f64;
        for (i, &l) in labels.iter().enumerate() {
            let row: Vec<f64> = z.data()[i * 5..(i + 1) * 5].iter().map(|&v| v as f64).collect();
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            expect -= (row[l].exp() / denom).ln();
        }
        expect /= 4.0;
        let mut t = Tape::new();
        let zv = t.constant(z);
        let l = t.cross_entropy(zv, &labels).unwrap();
        assert!((t.value(l).item().unwrap() as f64 - expect).abs() <= 1e-6);
    }
}

/// Small conv net forward+backward, returning (loss, every gradient).
fn conv_net_pass(seed: u64) -> (f32, Vec<Vec<f32>>) {
    let mut r = rng(seed);
    let x = uniform(&[2, 3, 5, 5], &mut r);
    let params = [uniform(&[4, 3, 3, 3], &mut r), uniform(&[4, 2], &mut r)];
    let mut t = Tape::new();
    let p: Vec<Var> = params.iter().map(|v| t.leaf(v.clone(), true)).collect();
    let xv = t.constant(x);
    let mut stats = RunningStats::new(4);
    let h = t.conv2d(xv, p[0], 1, 1).unwrap();
    let h = t.batch_norm2d(h, &mut stats, NormPhase::Train, BN_MOMENTUM, BN_EPS).unwrap();
    let h = t.relu(h);
    let h = t.global_avg_pool(h).unwrap();
    let z = t.matmul(h, p[1]).unwrap();
    let loss = t.cross_entropy(z, &[1, 0]).unwrap();
    let value = t.value(loss).item().unwrap();
    let g = t.backward(loss).unwrap();
    (value, p.iter().map(|v| g.get(*v).unwrap().data().to_vec()).collect())
}

#[test]
fn forward_and_backward_are_bit_deterministic() {
    let (l1, g1) = conv_net_pass(9);
    let (l2, g2) = conv_net_pass(9);
    assert_eq!(l1.to_bits(), l2.to_bits());
    for (a, b) in g1.iter().zip(&g2) {
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// grad(a·f + b·g) = a·grad f + b·grad g on shared parameters.
    #[test]
    fn backward_is_linear(seed in 0u64..10_000, a in -2.0f32..2.0, b in -2.0f32..2.0) {
        let mut r = rng(seed);
        let w = uniform(&[2, 3], &mut r);
        let x = uniform(&[3, 2], &mut r);
        let f = |t: &mut Tape, wv: Var| {
            let xv = t.constant(x.clone());
            let y = t.matmul(wv, xv).unwrap();
            let y = t.tanh(y);
            t.sum(y)
        };
        let g = |t: &mut Tape, wv: Var| {
            let sq = t.mul(wv, wv).unwrap();
            let s = t.sigmoid(sq);
            t.mean(s)
        };
        let grad_of = |combine: &dyn Fn(&mut Tape, Var) -> Var| {
            let mut t = Tape::new();
            let wv = t.leaf(w.clone(), true);
            let loss = combine(&mut t, wv);
            t.backward(loss).unwrap().get(wv).unwrap().data().to_vec()
        };
        let gf = grad_of(&|t, wv| f(t, wv));
        let gg = grad_of(&|t, wv| g(t, wv));
        let gc = grad_of(&|t, wv| {
            let fv = f(t, wv);
            let gv = g(t, wv);
            let fa = t.mul_scalar(fv, a);
            let gb = t.mul_scalar(gv, b);
            t.add(fa, gb).unwrap()
        });
        for i in 0..gc.len() {
            prop_assert!((gc[i] - (a * gf[i] + b * gg[i])).abs() <= 1e-5);
        }
    }

    #[test]
    fn broadcast_add_matches_explicit_expansion(rows in 1usize..5, cols in 1usize..5, seed in 0u64..1000) {
        let mut r = rng(seed);
        let m = uniform(&[rows, cols], &mut r);
        let v = uniform(&[cols], &mut r);
        let mut t = Tape::new();
        let (mv, vv) = (t.constant(m.clone()), t.constant(v.clone()));
        let y = t.add(mv, vv).unwrap();
        for i in 0..rows {
            for j in 0..cols {
                prop_assert_eq!(t.value(y).data()[i * cols + j], m.data()[i * cols + j] + v.data()[j]);
            }
        }
    }
}
