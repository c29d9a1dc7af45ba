use crate::error::{Error, Result};
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::Tensor;

/// Whether normalization uses batch statistics or stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormPhase {
    Train,
    Eval,
}

/// Per-channel running mean and variance of a normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub initialized: bool,
}

impl RunningStats {
    /// Mean 0, variance 1: the usual starting point for a fresh layer.
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![0.0; channels], var: vec![1.0; channels], initialized: true }
    }

    /// Placeholder that must see a training batch before eval-mode use.
    pub fn uninitialized(channels: usize) -> Self {
        RunningStats { initialized: false, ..Self::new(channels) }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

impl Tape {
    /// Per-channel normalization of `[N, C, H, W]` without an affine step.
    ///
    /// Train phase normalizes with the biased batch variance and folds the
    /// batch statistics into `stats` (unbiased variance); eval phase uses
    /// `stats` as-is.
    pub fn batch_norm2d(
        &mut self,
        input: Var,
        stats: &mut RunningStats,
        phase: NormPhase,
        momentum: f32,
        eps: f32,
    ) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let &[n, c, h, w] = shape.as_slice() else {
            return Err(Error::shape("batch_norm2d", format!("need rank-4 input, got {shape:?}")));
        };
        if stats.channels() != c {
            return Err(Error::shape(
                "batch_norm2d",
                format!("input has {c} channels, running stats have {}", stats.channels()),
            ));
        }
        let hw = h * w;
        let count = n * hw;
        let x = self.value(input).data();
        let mut out = vec![0.0f32; x.len()];
        let mut inv_std = vec![0.0f32; c];
        let train = phase == NormPhase::Train;

        if train {
            if count < 2 {
                return Err(Error::InvalidArgument(format!(
                    "train-mode batch_norm2d needs at least 2 values per channel, got {count}"
                )));
            }
            for ch in 0..c {
                let planes = || (0..n).flat_map(move |i| x[(i * c + ch) * hw..][..hw].iter());
                let mean = planes().map(|&v| v as f64).sum::<f64>() / count as f64;
                let var = planes().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / count as f64;
                let istd = 1.0 / (var + eps as f64).sqrt();
                for i in 0..n {
                    let base = (i * c + ch) * hw;
                    for j in base..base + hw {
                        out[j] = ((x[j] as f64 - mean) * istd) as f32;
                    }
                }
                inv_std[ch] = istd as f32;
                let unbiased = var * count as f64 / (count - 1) as f64;
                stats.mean[ch] = (1.0 - momentum) * stats.mean[ch] + momentum * mean as f32;
                stats.var[ch] = (1.0 - momentum) * stats.var[ch] + momentum * unbiased as f32;
            }
            stats.initialized = true;
        } else {
            if !stats.initialized {
                return Err(Error::UninitializedStats);
            }
            for ch in 0..c {
                let istd = 1.0 / (stats.var[ch] + eps).sqrt();
                let mean = stats.mean[ch];
                for i in 0..n {
                    let base = (i * c + ch) * hw;
                    for j in base..base + hw {
                        out[j] = (x[j] - mean) * istd;
                    }
                }
                inv_std[ch] = istd;
            }
        }
        let rg = self.requires_grad(input);
        Ok(self.push(Tensor::from_parts(shape, out), rg, Op::BatchNorm { input, inv_std, train }))
    }

    /// `x * gamma[c] + beta[c]` along axis 1 of a rank ≥ 2 tensor.
    pub fn channel_affine(&mut self, input: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("channel_affine", format!("need rank >= 2 input, got {shape:?}")));
        }
        let c = shape[1];
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).numel() != c {
                return Err(Error::shape(
                    "channel_affine",
                    format!("{name} has shape {:?}, input has {c} channels", self.shape(v)),
                ));
            }
        }
        let inner: usize = shape[2..].iter().product();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = self.value(input).data().to_vec();
        for (k, plane) in out.chunks_exact_mut(inner).enumerate() {
            let ch = k % c;
            plane.iter_mut().for_each(|v| *v = *v * g[ch] + b[ch]);
        }
        let rg = self.any_grad(&[input, gamma, beta]);
        Ok(self.push(Tensor::from_parts(shape, out), rg, Op::ChannelAffine { input, gamma, beta }))
    }
}

pub(crate) fn batch_norm_backward(
    sink: &mut GradSink,
    input: Var,
    xhat: &Tensor,
    inv_std: &[f32],
    train: bool,
    g: &[f32],
) {
    if !sink.wants(input) {
        return;
    }
    let &[n, c, h, w] = xhat.shape() else { unreachable!("checked in forward") };
    let hw = h * w;
    let xh = xhat.data();
    let mut gx = vec![0.0f32; g.len()];
    for ch in 0..c {
        let idx = || (0..n).flat_map(move |i| (i * c + ch) * hw..(i * c + ch + 1) * hw);
        let istd = inv_std[ch] as f64;
        if train {
            let m = (n * hw) as f64;
            let sum_g: f64 = idx().map(|j| g[j] as f64).sum();
            let sum_gx: f64 = idx().map(|j| g[j] as f64 * xh[j] as f64).sum();
            for j in idx() {
                gx[j] = (istd / m * (m * g[j] as f64 - sum_g - xh[j] as f64 * sum_gx)) as f32;
            }
        } else {
            for j in idx() {
                gx[j] = g[j] * inv_std[ch];
            }
        }
    }
    sink.add(input, gx);
}

pub(crate) fn channel_affine_backward(sink: &mut GradSink, input: Var, gamma: Var, beta: Var, g: &[f32]) {
    let shape = sink.value(input).shape().to_vec();
    let c = shape[1];
    let inner: usize = shape[2..].iter().product();
    if sink.wants(input) {
        let gam = sink.value(gamma).data();
        let gx = g.chunks_exact(inner).enumerate().flat_map(|(k, p)| p.iter().map(move |d| d * gam[k % c])).collect();
        sink.add(input, gx);
    }
    if sink.wants(gamma) {
        let x = sink.value(input).data();
        let mut gg = vec![0.0f64; c];
        for (k, (pg, px)) in g.chunks_exact(inner).zip(x.chunks_exact(inner)).enumerate() {
            gg[k % c] += pg.iter().zip(px).map(|(a, b)| (*a as f64) * (*b as f64)).sum::<f64>();
        }
        sink.add(gamma, gg.into_iter().map(|v| v as f32).collect());
    }
    if sink.wants(beta) {
        let mut gb = vec![0.0f64; c];
        for (k, pg) in g.chunks_exact(inner).enumerate() {
            gb[k % c] += pg.iter().map(|&v| v as f64).sum::<f64>();
        }
        sink.add(beta, gb.into_iter().map(|v| v as f32).collect());
    }
}
