//! Backward vs. central finite differences (step 1e-3, f32).

mod common;

use common::*;
use forge_autodiff::{Error, NormPhase, RunningStats, Tape, Tensor, Var, BN_EPS, BN_MOMENTUM};
use rand::Rng;

const TOL: f64 = 1e-3;
const SHAPES: u64 = 20;

fn assert_close(what: &str, err: f64) {
    assert!(err <= TOL, "{what}: relative error {err:.2e} > {TOL:.0e}");
}

#[test]
fn conv2d_grads() {
    for case in 0..SHAPES {
        let mut r = rng(100 + case);
        let (n, cin, cout) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4));
        let (k, stride, pad) = (r.gen_range(1..4), r.gen_range(1..3), r.gen_range(0..2));
        let (h, w) = (r.gen_range(k..6), r.gen_range(k..6));
        let x = uniform(&[n, cin, h, w], &mut r);
        let wt = uniform(&[cout, cin, k, k], &mut r);
        let err = check_grads(&[x, wt], &|t, v| {
            t.conv2d(v[0], v[1], stride, pad).unwrap()
        });
        assert_close(&format!("conv2d case {case}"), err);
    }
}

#[test]
fn batch_norm_grads_train_and_eval() {
    for case in 0..SHAPES {
        let mut r = rng(200 + case);
        let shape = [r.gen_range(2..4), r.gen_range(1..4), r.gen_range(1..4), r.gen_range(2..4)];
        let x = uniform(&shape, &mut r);
        for phase in [NormPhase::Train, NormPhase::Eval] {
            let c = shape[1];
            let err = check_grads(&[x.clone()], &|t, v| {
                let mut stats = RunningStats::new(c);
                stats.mean.iter_mut().enumerate().for_each(|(i, m)| *m = 0.1 * i as f32);
                stats.var.iter_mut().enumerate().for_each(|(i, s)| *s = 0.5 + 0.2 * i as f32);
                t.batch_norm2d(v[0], &mut stats, phase, BN_MOMENTUM, BN_EPS).unwrap()
            });
            assert_close(&format!("batch_norm2d {phase:?} case {case}"), err);
        }
    }
}

#[test]
fn batch_norm_grads_2x3x4x4() {
    let x = uniform(&[2, 3, 4, 4], &mut rng(7));
    let err = check_grads(&[x], &|t, v| {
        let mut stats = RunningStats::new(3);
        let y = t.batch_norm2d(v[0], &mut stats, NormPhase::Train, BN_MOMENTUM, BN_EPS).unwrap();
        y
    });
    assert_close("batch_norm2d 2x3x4x4", err);
}

#[test]
fn activation_grads() {
    for case in 0..SHAPES {
        let mut r = rng(300 + case);
        let shape = [r.gen_range(1..5), r.gen_range(1..6)];
        let x = away_from_zero(&shape, &mut r);
        type Act = fn(&mut Tape, Var) -> Var;
        let acts: [(&str, Act); 4] = [
            ("relu", |t, x| t.relu(x)),
            ("leaky_relu", |t, x| t.leaky_relu(x, 0.01).unwrap()),
            ("tanh", |t, x| t.tanh(x)),
            ("sigmoid", |t, x| t.sigmoid(x)),
        ];
        for (name, act) in acts {
            let err = check_grads(&[x.clone()], &|t, v| {
                act(t, v[0])
            });
            assert_close(&format!("{name} case {case}"), err);
        }
    }
}

#[test]
fn leaky_relu_slope_on_negative_side() {
    let f = |x: f32| {
        let mut t = Tape::new();
        let v = t.constant(Tensor::scalar(x));
        let y = t.leaky_relu(v, 0.01).unwrap();
        t.value(y).item().unwrap()
    };
    let fd = (f(-3.0 + 1e-3) - f(-3.0 - 1e-3)) / 2e-3;
    assert!((fd - 0.01).abs() < 1e-4, "fd {fd}");

    let mut t = Tape::new();
    let v = t.leaf(Tensor::scalar(-3.0), true);
    let y = t.leaky_relu(v, 0.01).unwrap();
    let g = t.backward(y).unwrap();
    assert!((g.get(v).unwrap().item().unwrap() - fd).abs() < 1e-4);
}

#[test]
fn matmul_and_broadcast_grads() {
    for case in 0..SHAPES {
        let mut r = rng(400 + case);
        let (m, k, n) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
        let a = uniform(&[m, k], &mut r);
        let b = uniform(&[k, n], &mut r);
        let bias = uniform(&[n], &mut r);
        let col = uniform(&[m, 1], &mut r);
        let err = check_grads(&[a, b, bias, col], &|t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            let y = t.add(y, v[2]).unwrap();
            let y = t.mul(y, v[3]).unwrap();
            let y = t.sub(y, v[2]).unwrap();
            let y = t.mul_scalar(y, 0.7);
            t.add_scalar(y, 0.3)
        });
        assert_close(&format!("matmul/broadcast case {case}"), err);
    }
}

#[test]
fn pooling_reduction_and_affine_grads() {
    for case in 0..SHAPES {
        let mut r = rng(500 + case);
        let shape = [r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4)];
        let x = uniform(&shape, &mut r);
        let gamma = uniform(&[shape[1]], &mut r);
        let beta = uniform(&[shape[1]], &mut r);
        let err = check_grads(&[x.clone(), gamma, beta], &|t, v| {
            t.channel_affine(v[0], v[1], v[2]).unwrap()
        });
        assert_close(&format!("channel_affine case {case}"), err);
        let err = check_grads(&[x.clone()], &|t, v| {
            t.global_avg_pool(v[0]).unwrap()
        });
        assert_close(&format!("global_avg_pool case {case}"), err);
        let axis = r.gen_range(0..4);
        let err = check_grads(&[x.clone()], &|t, v| {
            t.sum_axis(v[0], axis).unwrap()
        });
        assert_close(&format!("sum_axis case {case}"), err);
        let err = check_grads(&[x], &|t, v| {
            let y = t.reshape(v[0], &[shape.iter().product()]).unwrap();
            let y = t.mul(y, y).unwrap();
            t.mean(y)
        });
        assert_close(&format!("reshape/mean case {case}"), err);
    }
}

#[test]
fn loss_grads() {
    for case in 0..SHAPES {
        let mut r = rng(600 + case);
        let (n, k) = (r.gen_range(1..6), r.gen_range(2..6));
        let logits = uniform(&[n, k], &mut r).scale(3.0);
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
        let err = check_grads(&[logits.clone()], &|t, v| t.cross_entropy(v[0], &labels).unwrap());
        assert_close(&format!("cross_entropy case {case}"), err);

        let targets: Vec<f32> = (0..n * k).map(|_| r.gen_range(0..2) as f32).collect();
        let err = check_grads(&[logits], &|t, v| t.bce_with_logits(v[0], &targets).unwrap());
        assert_close(&format!("bce case {case}"), err);
    }
}

mod reference {
    //! Plain f64 nested-loop forward pass of the toy CNN, independent of the
    //! tape, so central differences are free of f32 round-off.

    pub fn conv(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], stride: usize, pad: usize) -> (Vec<f64>, [usize; 4]) {
        let [n, cin, h, wd] = xs;
        let [cout, _, kh, kw] = ws;
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * cout * ho * wo];
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x[((b * cin + ci) * h + iy as usize) * wd + ix as usize]
                                            * w[((co * cin + ci) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                        out[((b * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        (out, [n, cout, ho, wo])
    }

    /// Batch-statistics normalization followed by the per-channel affine.
    pub fn bn_affine(x: &mut [f64], s: [usize; 4], gamma: &[f64], beta: &[f64]) {
        let [n, c, h, w] = s;
        let hw = h * w;
        for ch in 0..c {
            let idx: Vec<usize> = (0..n).flat_map(|b| (b * c + ch) * hw..(b * c + ch + 1) * hw).collect();
            let m = idx.iter().map(|&i| x[i]).sum::<f64>() / idx.len() as f64;
            let v = idx.iter().map(|&i| (x[i] - m).powi(2)).sum::<f64>() / idx.len() as f64;
            for &i in &idx {
                x[i] = (x[i] - m) / (v + 1e-5).sqrt() * gamma[ch] + beta[ch];
            }
        }
    }

    pub fn toy_cnn_loss(x: &[f64], labels: &[usize], p: &[Vec<f64>]) -> f64 {
        let (mut h, s) = conv(x, [3, 2, 6, 6], &p[0], [4, 2, 3, 3], 1, 1);
        bn_affine(&mut h, s, &p[1], &p[2]);
        h.iter_mut().for_each(|v| if *v < 0.0 { *v *= 0.01 });
        let (mut h, s) = conv(&h, s, &p[3], [5, 4, 3, 3], 2, 1);
        bn_affine(&mut h, s, &p[4], &p[5]);
        h.iter_mut().for_each(|v| *v = v.tanh());
        let [n, c, hh, ww] = s;
        let pooled: Vec<f64> = h.chunks(hh * ww).map(|pl| pl.iter().sum::<f64>() / (hh * ww) as f64).collect();
        let k = 3;
        let mut loss = 0.0;
        for b in 0..n {
            let z: Vec<f64> = (0..k)
                .map(|j| (0..c).map(|i| pooled[b * c + i] * p[6][i * k + j]).sum::<f64>() + p[7][j])
                .collect();
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            loss += lse - z[labels[b]];
        }
        loss / n as f64
    }
}

/// conv → bn → affine → leaky → strided conv → bn → affine → tanh → gap →
/// linear → cross-entropy. Every parameter's tape gradient is compared with
/// central differences (step 1e-3) of the f64 reference forward.
#[test]
fn toy_cnn_all_parameter_grads() {
    let mut r = rng(42);
    let x = uniform(&[3, 2, 6, 6], &mut r);
    let labels = [0usize, 2, 1];
    let params = vec![
        uniform(&[4, 2, 3, 3], &mut r),
        away_from_zero(&[4], &mut r),
        uniform(&[4], &mut r),
        uniform(&[5, 4, 3, 3], &mut r),
        away_from_zero(&[5], &mut r),
        uniform(&[5], &mut r),
        uniform(&[5, 3], &mut r),
        uniform(&[3], &mut r),
    ];

    let mut t = Tape::new();
    let p: Vec<Var> = params.iter().map(|v| t.leaf(v.clone(), true)).collect();
    let xv = t.constant(x.clone());
    let mut s1 = RunningStats::new(4);
    let mut s2 = RunningStats::new(5);
    let h = t.conv2d(xv, p[0], 1, 1).unwrap();
    let h = t.batch_norm2d(h, &mut s1, NormPhase::Train, BN_MOMENTUM, BN_EPS).unwrap();
    let h = t.channel_affine(h, p[1], p[2]).unwrap();
    let h = t.leaky_relu(h, 0.01).unwrap();
    let h = t.conv2d(h, p[3], 2, 1).unwrap();
    let h = t.batch_norm2d(h, &mut s2, NormPhase::Train, BN_MOMENTUM, BN_EPS).unwrap();
    let h = t.channel_affine(h, p[4], p[5]).unwrap();
    let h = t.tanh(h);
    let h = t.global_avg_pool(h).unwrap();
    let z = t.matmul(h, p[6]).unwrap();
    let z = t.add(z, p[7]).unwrap();
    let loss = t.cross_entropy(z, &labels).unwrap();
    let tape_loss = t.value(loss).item().unwrap() as f64;
    let grads = t.backward(loss).unwrap();

    let x64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let p64: Vec<Vec<f64>> = params.iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect();
    let ref_loss = reference::toy_cnn_loss(&x64, &labels, &p64);
    assert!((tape_loss - ref_loss).abs() < 1e-5, "forward {tape_loss} vs reference {ref_loss}");

    let h = 1e-3;
    for (i, var) in p.iter().enumerate() {
        let mut numeric = Vec::new();
        for j in 0..p64[i].len() {
            let mut plus = p64.clone();
            plus[i][j] += h;
            let mut minus = p64.clone();
            minus[i][j] -= h;
            let fd = (reference::toy_cnn_loss(&x64, &labels, &plus) - reference::toy_cnn_loss(&x64, &labels, &minus)) / (2.0 * h);
            numeric.push(fd as f32);
        }
        let err = rel_err(grads.get(*var).unwrap().data(), &numeric);
        assert_close(&format!("toy cnn parameter {i}"), err);
    }
}

#[test]
fn analytic_examples() {
    let mut t = Tape::new();
    let w = t.leaf(Tensor::from_slice(&[0.3, -1.2, 4.0]), true);
    let s = t.sum(w);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut t = Tape::new();
    let w = t.leaf(Tensor::from_slice(&[1.0, 2.0]), true);
    let sq = t.mul(w, w).unwrap();
    let m = t.mean(sq);
    let g = t.backward(m).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn backward_contract_errors() {
    let mut t = Tape::new();
    let w = t.leaf(Tensor::from_slice(&[1.0, 2.0]), true);
    assert_eq!(t.backward(w).unwrap_err(), Error::NonScalarLoss(vec![2]));
    let s = t.sum(w);
    t.backward(s).unwrap();
    assert_eq!(t.backward(s).unwrap_err(), Error::BackwardTwice);
    t.reset();
    let w = t.leaf(Tensor::from_slice(&[1.0, 2.0]), true);
    let s = t.sum(w);
    assert!(t.backward(s).is_ok());
}

#[test]
fn frozen_leaves_get_no_gradient() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::ones(&[1, 1, 3, 3]));
    let w = t.leaf(Tensor::ones(&[1, 1, 3, 3]), false);
    let y = t.conv2d(x, w, 1, 1).unwrap();
    let s = t.sum(y);
    assert!(!t.requires_grad(s));
    let g = t.backward(s).unwrap();
    assert!(g.get(w).is_none());
}
