//! Mini-batch SGD loops, evaluation, and ownership verification.

use std::str::FromStr;

use forge_autodiff::{Adam, Sgd, Tape, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::argmax_rows;
use crate::model::{ForwardOpts, Model, ModelSpec};
use crate::passport::{sign_loss, PassportSet, SignatureSet};
use crate::rng::substream;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Sgd,
    /// Adam; `momentum` and `weight_decay` are ignored.
    Adam,
}

impl FromStr for Optimizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            _ => Err(Error::Config(format!("unknown optimizer `{s}` (sgd, adam)"))),
        }
    }
}

/// Optimizer settings for one training loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Anneal the learning rate along a half cosine over the epochs.
    pub cosine: bool,
    /// Rescale the gradient when its global L2 norm exceeds this.
    #[serde(default)]
    pub clip_norm: Option<f32>,
    /// Ramp the learning rate linearly from zero over this many epochs.
    #[serde(default)]
    pub warmup_epochs: usize,
    #[serde(default)]
    pub optimizer: Optimizer,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig { epochs: 10, batch_size: 64, lr: 0.05, momentum: 0.9, weight_decay: 5e-4, cosine: true, clip_norm: None, warmup_epochs: 0, optimizer: Optimizer::Sgd }
    }
}

impl LoopConfig {
    fn lr_at(&self, epoch: usize) -> f32 {
        if !self.cosine || self.epochs <= 1 {
            return self.lr;
        }
        let t = epoch as f32 / self.epochs as f32;
        self.lr * 0.5 * (1.0 + (std::f32::consts::PI * t).cos())
    }

    /// Learning rate of the 0-based optimizer `step`, ramped linearly over the
    /// first `warmup_steps`.
    fn step_lr(&self, epoch: usize, step: usize, warmup_steps: usize) -> f32 {
        let ramp = if step < warmup_steps { (step + 1) as f32 / warmup_steps as f32 } else { 1.0 };
        self.lr_at(epoch) * ramp
    }
}

/// Sign-loss embedding settings on top of the optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedHyper {
    pub alpha: f32,
    pub margin: f32,
    #[serde(flatten)]
    pub optim: LoopConfig,
}

impl Default for EmbedHyper {
    fn default() -> Self {
        EmbedHyper { alpha: 0.1, margin: 0.1, optim: LoopConfig::default() }
    }
}

/// One row of a training or attack history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f32,
    pub test_acc: f32,
    /// Per passport site, in site order.
    pub bdr: Vec<f32>,
}

/// Run `cfg.epochs` of shuffled mini-batch SGD over the model's trainable
/// parameters. `loss` builds the batch objective; `after_epoch` sees the
/// 1-based epoch and the mean batch loss. Batches of one sample are skipped
/// because batch statistics need two.
pub fn fit<F, E>(model: &mut Model, data: &Dataset, cfg: &LoopConfig, seed: u64, stream: &str, mut loss: F, mut after_epoch: E) -> Result<()>
where
    F: FnMut(&mut Model, &mut Tape, Var, &[usize]) -> Result<Var>,
    E: FnMut(&mut Model, usize, f32) -> Result<()>,
{
    if data.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut rng = substream(seed, stream);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut tape = Tape::new();
    let warmup_steps = cfg.warmup_epochs * order.chunks(cfg.batch_size).filter(|c| c.len() >= 2).count();
    let mut step = 0usize;
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut adam = Adam::new(cfg.lr);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let (x, y) = data.batch(chunk);
            tape.reset();
            let xv = tape.constant(x);
            let l = loss(model, &mut tape, xv, &y)?;
            let value = tape.value(l).item()?;
            if !value.is_finite() {
                return Err(Error::Divergence { epoch: epoch + 1, loss: value });
            }
            tape.backward(l)?.apply(&mut model.store)?;
            if let Some(max) = cfg.clip_norm {
                clip_grad_norm(model, max);
            }
            let lr = cfg.step_lr(epoch, step, warmup_steps);
            match cfg.optimizer {
                Optimizer::Sgd => {
                    sgd.lr = lr;
                    sgd.step(&mut model.store)?
                }
                Optimizer::Adam => {
                    adam.lr = lr;
                    adam.step(&mut model.store)?
                }
            }
            step += 1;
            total += value as f64;
            batches += 1;
        }
        after_epoch(model, epoch + 1, (total / batches.max(1) as f64) as f32)?;
    }
    Ok(())
}

fn clip_grad_norm(model: &mut Model, max: f32) {
    let sq: f64 = model
        .store
        .iter()
        .filter_map(|(_, p)| p.grad.as_ref())
        .flat_map(|g| g.data().iter())
        .map(|&v| v as f64 * v as f64)
        .sum();
    let norm = sq.sqrt() as f32;
    if norm > max {
        let k = max / norm;
        for p in model.store.iter_mut() {
            if let Some(g) = p.grad.as_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= k);
            }
        }
    }
}

/// Classification accuracy in eval mode.
pub fn evaluate(model: &mut Model, data: &Dataset, passports: Option<&PassportSet>) -> Result<f32> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut hits = 0usize;
    for chunk in idx.chunks(250) {
        let (x, y) = data.batch(chunk);
        let logits = model.logits(&x, passports)?;
        let k = logits.shape()[1];
        hits += argmax_rows(logits.data(), k).zip(&y).filter(|(p, l)| p == *l).count();
    }
    Ok((hits as f64 / data.len() as f64) as f32)
}

/// Train with task loss only. Passport sites, if any, need passports.
pub fn train_baseline(spec: &ModelSpec, train: &Dataset, test: &Dataset, cfg: &LoopConfig, seed: u64) -> Result<(Model, Vec<EpochRecord>)> {
    let mut model = Model::build(spec, seed)?;
    if !spec.passport_sites.is_empty() {
        return Err(Error::InvalidSpec("a baseline has no passport sites".into()));
    }
    let mut history = Vec::new();
    fit(
        &mut model,
        train,
        cfg,
        seed,
        "shuffle",
        |m, tape, x, y| {
            let out = m.forward(tape, x, &ForwardOpts::train(None))?;
            Ok(tape.cross_entropy(out.logits, y)?)
        },
        |m, epoch, train_loss| {
            let test_acc = evaluate(m, test, None)?;
            history.push(EpochRecord { epoch, train_loss, test_acc, bdr: Vec::new() });
            Ok(())
        },
    )?;
    Ok((model, history))
}

/// Train with `task loss + alpha * sum of per-site sign losses`, the scale
/// factors at passport sites coming from the fixed passports.
pub fn train_protected(
    spec: &ModelSpec,
    passports: &PassportSet,
    signatures: &SignatureSet,
    train: &Dataset,
    test: &Dataset,
    hyper: &EmbedHyper,
    seed: u64,
) -> Result<(Model, Vec<EpochRecord>)> {
    if hyper.alpha < 0.0 || hyper.margin <= 0.0 {
        return Err(Error::InvalidArgument(format!("alpha {} must be >= 0 and margin {} > 0", hyper.alpha, hyper.margin)));
    }
    let sites = spec.sites();
    for &i in &spec.passport_sites {
        let p = passports.get(&i).ok_or(Error::MissingPassport(i))?;
        let s = signatures.get(&i).ok_or_else(|| Error::InvalidArgument(format!("no signature for site {i}")))?;
        let g = &sites[i];
        if p.shape() != [g.cin, g.in_hw.0, g.in_hw.1] || s.len() != g.cout {
            return Err(Error::InvalidArgument(format!("passport or signature shape does not fit site {i}")));
        }
    }
    let mut model = Model::build(spec, seed)?;
    let mut history = Vec::new();
    let site_list = spec.passport_sites.clone();
    fit(
        &mut model,
        train,
        &hyper.optim,
        seed,
        "shuffle",
        |m, tape, x, y| {
            let out = m.forward(tape, x, &ForwardOpts::train(Some(passports)))?;
            let mut loss = tape.cross_entropy(out.logits, y)?;
            for &i in &site_list {
                let sl = sign_loss(tape, out.gammas[i], &signatures[&i], hyper.margin)?;
                let sl = tape.mul_scalar(sl, hyper.alpha);
                loss = tape.add(loss, sl)?;
            }
            Ok(loss)
        },
        |m, epoch, train_loss| {
            let test_acc = evaluate(m, test, Some(passports))?;
            let affines = m.site_affines(Some(passports))?;
            let bdr = site_list
                .iter()
                .map(|i| signatures[i].match_rate(affines[*i].0.data()).map(|r| 1.0 - r))
                .collect::<Result<_>>()?;
            history.push(EpochRecord { epoch, train_loss, test_acc, bdr });
            Ok(())
        },
    )?;
    Ok((model, history))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub acc: f32,
    /// Fraction of signature bits, over all passport sites, matched by the
    /// signs of the derived scale factors.
    pub sign_match: f32,
    pub pass: bool,
}

/// Ownership check: derived scale-factor signs must equal the signature at
/// every passport site and accuracy must reach `threshold`.
pub fn verify(model: &mut Model, passports: &PassportSet, signatures: &SignatureSet, test: &Dataset, threshold: f32) -> Result<Verification> {
    let sites = model.spec.passport_sites.clone();
    if sites.is_empty() {
        return Err(Error::InvalidArgument("model has no passport sites to verify".into()));
    }
    let affines = model.site_affines(Some(passports))?;
    let (mut hits, mut bits) = (0.0f64, 0usize);
    for &i in &sites {
        let s = signatures.get(&i).ok_or_else(|| Error::InvalidArgument(format!("no signature for site {i}")))?;
        hits += s.match_rate(affines[i].0.data())? as f64 * s.len() as f64;
        bits += s.len();
    }
    let sign_match = (hits / bits as f64) as f32;
    let acc = evaluate(model, test, Some(passports))?;
    Ok(Verification { acc, sign_match, pass: sign_match == 1.0 && acc >= threshold })
}
