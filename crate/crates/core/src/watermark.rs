//! Weight-regularizer watermark: bits are read off the signs of a secret
//! projection of one conv layer's channel-averaged kernel.

use std::collections::BTreeMap;

use forge_autodiff::{NormPhase, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::archive::{Archive, WATERMARK_KEY_MAGIC};
use crate::attack::{block_layout, cerb_rows, default_hidden, init_block, Activation, BlockKind};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{bit_error_rate, sdr};
use crate::model::{conv_name, ForwardOpts, Model, ModelSpec};
use crate::rng::substream;
use crate::train::{evaluate, fit, EpochRecord, LoopConfig, Optimizer};

#[derive(Clone, Debug, PartialEq)]
pub struct WatermarkKey {
    /// Secret projection `[bits, d]`, `d` the flattened kernel size.
    pub x: Tensor,
    pub bits: Vec<u8>,
    /// Site index of the watermarked conv.
    pub layer: usize,
}

impl WatermarkKey {
    /// Standard-normal projection and uniformly random bits.
    pub fn generate(spec: &ModelSpec, layer: usize, n_bits: usize, seed: u64) -> Result<Self> {
        let g = spec.sites().get(layer).copied().ok_or_else(|| Error::InvalidArgument(format!("no conv {layer}")))?;
        if n_bits == 0 {
            return Err(Error::InvalidArgument("watermark needs at least one bit".into()));
        }
        let d = g.cin * g.kernel * g.kernel;
        let mut rng = substream(seed, "watermark/key");
        let x = Tensor::randn(&[n_bits, d], 1.0, &mut rng);
        let bits = (0..n_bits).map(|_| rng.gen_range(0..=1u8)).collect();
        Ok(WatermarkKey { x, bits, layer })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut t = BTreeMap::new();
        t.insert("x".to_string(), self.x.clone());
        Archive::new(t, json!({"bits": self.bits, "layer": self.layer})).to_bytes(WATERMARK_KEY_MAGIC)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut a = Archive::from_bytes(bytes, WATERMARK_KEY_MAGIC)?;
        let bad = |d: &str| Error::format("watermark key", d.to_string());
        let x = a.tensors.remove("x").ok_or_else(|| bad("no projection tensor"))?;
        if !a.tensors.is_empty() || x.rank() != 2 {
            return Err(bad("unexpected tensors or projection rank"));
        }
        let bits: Vec<u8> = serde_json::from_value(a.meta.get("bits").cloned().ok_or_else(|| bad("no bits"))?)?;
        let layer: usize = serde_json::from_value(a.meta.get("layer").cloned().ok_or_else(|| bad("no layer"))?)?;
        if bits.len() != x.shape()[0] || bits.iter().any(|&b| b > 1) {
            return Err(bad("bits do not match the projection"));
        }
        Ok(WatermarkKey { x, bits, layer })
    }
}

/// Kernel averaged over output channels and flattened: `[d]`.
pub fn mean_kernel(weight: &Tensor) -> Vec<f32> {
    let cout = weight.shape()[0];
    let d = weight.numel() / cout;
    let mut out = vec![0.0f64; d];
    for row in weight.data().chunks_exact(d) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v as f64;
        }
    }
    out.into_iter().map(|v| (v / cout as f64) as f32).collect()
}

/// `bit_i = 1` iff `sigmoid(X_i · w̄) > 0.5`, i.e. the projection is positive.
pub fn extract_bits(weight: &Tensor, key: &WatermarkKey) -> Result<Vec<u8>> {
    let w = mean_kernel(weight);
    let d = key.x.shape()[1];
    if w.len() != d {
        return Err(Error::InvalidArgument(format!("key expects a {d}-dim kernel, layer has {}", w.len())));
    }
    Ok(key
        .x
        .data()
        .chunks_exact(d)
        .map(|row| {
            let dot: f64 = row.iter().zip(&w).map(|(&a, &b)| a as f64 * b as f64).sum();
            u8::from(dot > 0.0)
        })
        .collect())
}

pub fn uchida_extract(model: &Model, key: &WatermarkKey) -> Result<Vec<u8>> {
    extract_bits(model.param(&conv_name(key.layer))?, key)
}

/// `BCE(sigmoid(X · w̄), bits)` on the tape, for a conv weight variable.
pub fn watermark_loss(tape: &mut Tape, weight: Var, key: &WatermarkKey, bits: &[u8]) -> Result<Var> {
    let shape = tape.shape(weight).to_vec();
    let cout = shape[0];
    let d: usize = shape[1..].iter().product();
    let rows = tape.reshape(weight, &[cout, d])?;
    avg_projection_loss(tape, rows, key, bits)
}

fn avg_projection_loss(tape: &mut Tape, rows: Var, key: &WatermarkKey, bits: &[u8]) -> Result<Var> {
    let cout = tape.shape(rows)[0];
    let avg = tape.constant(Tensor::full(&[1, cout], 1.0 / cout as f32));
    let w_bar = tape.matmul(avg, rows)?;
    let xt = tape.constant(transpose(&key.x));
    let logits = tape.matmul(w_bar, xt)?;
    let targets: Vec<f32> = bits.iter().map(|&b| b as f32).collect();
    Ok(tape.bce_with_logits(logits, &targets)?)
}

fn transpose(x: &Tensor) -> Tensor {
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out).unwrap()
}

/// Train a passport-free model with `task loss + lambda * watermark loss`.
pub fn uchida_embed(
    spec: &ModelSpec,
    train: &Dataset,
    test: &Dataset,
    key: &WatermarkKey,
    lambda: f32,
    cfg: &LoopConfig,
    seed: u64,
) -> Result<(Model, Vec<EpochRecord>)> {
    if !spec.passport_sites.is_empty() {
        return Err(Error::InvalidSpec("weight watermarking uses a passport-free model".into()));
    }
    let mut model = Model::build(spec, seed)?;
    uchida_extract(&model, key)?;
    let target = conv_name(key.layer);
    let mut history = Vec::new();
    fit(
        &mut model,
        train,
        cfg,
        seed,
        "shuffle",
        |m, tape, x, y| {
            let w = tape.bind(&m.store, m.store.id(&target).expect("conv exists"));
            let opts = ForwardOpts { phase: NormPhase::Train, passports: None, conv_override: Some((key.layer, w)) };
            let out = m.forward(tape, x, &opts)?;
            let ce = tape.cross_entropy(out.logits, y)?;
            let wm = watermark_loss(tape, w, key, &key.bits)?;
            let wm = tape.mul_scalar(wm, lambda);
            Ok(tape.add(ce, wm)?)
        },
        |m, epoch, train_loss| {
            let test_acc = evaluate(m, test, None)?;
            let ber = bit_error_rate(&uchida_extract(m, key)?, &key.bits)?;
            history.push(EpochRecord { epoch, train_loss, test_acc, bdr: vec![ber] });
            Ok(())
        },
    )?;
    Ok((model, history))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WmAttackConfig {
    pub lambda: f32,
    pub activation: Activation,
    pub depth: usize,
    pub optim: LoopConfig,
    pub seed: u64,
}

impl Default for WmAttackConfig {
    fn default() -> Self {
        WmAttackConfig {
            lambda: 1.0,
            activation: Activation::LeakyRelu,
            depth: 2,
            optim: LoopConfig { epochs: 10, batch_size: 64, lr: 0.01, momentum: 0.9, weight_decay: 0.0, cosine: true, clip_norm: Some(5.0), warmup_epochs: 0, optimizer: Optimizer::Sgd },
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WmAttackReport {
    pub acc: f32,
    /// Extraction agreement with the forged bits.
    pub sdr_new: f32,
    /// Extraction disagreement with the owner's bits.
    pub bdr_original: f32,
    pub audit_passed: bool,
}

/// Forge `new_bits` into a watermarked model. A shared perceptron with a
/// skip connection maps each output-channel row of the target kernel; only
/// that kernel and the perceptron train, under task loss plus the watermark
/// loss toward `new_bits`. The returned model holds the mapped kernel.
pub fn cerb_attack_watermark(
    checkpoint: &[u8],
    spec: &ModelSpec,
    attack_data: &Dataset,
    test: &Dataset,
    key: &WatermarkKey,
    new_bits: &[u8],
    cfg: &WmAttackConfig,
) -> Result<(Model, WmAttackReport)> {
    if new_bits == key.bits.as_slice() {
        return Err(Error::InvalidArgument("forged bits equal the owner's bits; no ambiguity to claim".into()));
    }
    if new_bits.len() != key.bits.len() {
        return Err(Error::InvalidArgument("forged bit count differs from the key".into()));
    }
    crate::data::ensure_disjoint_from_test(attack_data, test)?;
    let (original, _) = Model::load_checkpoint(checkpoint, spec)?;
    let target = conv_name(key.layer);
    let wshape = original.param(&target)?.shape().to_vec();
    let (cout, d) = (wshape[0], wshape[1..].iter().product::<usize>());

    let mut model = original.clone();
    let mut rng = substream(cfg.seed, "wm-attack/init");
    let layout = block_layout(BlockKind::Cerb, d, cfg.depth, default_hidden(BlockKind::Cerb, d))?;
    let mut block_ids = Vec::with_capacity(layout.len());
    for (name, t) in init_block(BlockKind::Cerb, d, cfg.depth, &mut rng)? {
        block_ids.push(model.store.insert(format!("wm_attack.cerb.{name}"), t, true)?);
    }
    model.set_trainable(|n| n == target || n.starts_with("wm_attack."));
    let target_id = model.store.id(&target).expect("checked");
    let layer = key.layer;

    let mapped = |m: &Model, tape: &mut Tape| -> Result<Var> {
        let w = tape.bind(&m.store, target_id);
        let rows = tape.reshape(w, &[cout, d])?;
        let layers: Vec<(Var, Var)> =
            block_ids.chunks(2).map(|p| (tape.bind(&m.store, p[0]), tape.bind(&m.store, p[1]))).collect();
        let z = cerb_rows(tape, cfg.activation, rows, &layers)?;
        let out = tape.add(z, rows)?;
        Ok(tape.reshape(out, &wshape)?)
    };
    fit(
        &mut model,
        attack_data,
        &cfg.optim,
        cfg.seed,
        "wm-attack/shuffle",
        |m, tape, x, y| {
            let w = mapped(m, tape)?;
            let opts = ForwardOpts { phase: NormPhase::Eval, passports: None, conv_override: Some((layer, w)) };
            let out = m.forward(tape, x, &opts)?;
            let ce = tape.cross_entropy(out.logits, y)?;
            let wm = watermark_loss(tape, w, key, new_bits)?;
            let wm = tape.mul_scalar(wm, cfg.lambda);
            Ok(tape.add(ce, wm)?)
        },
        |_, _, _| Ok(()),
    )?;

    let mut tape = Tape::new();
    let w = mapped(&model, &mut tape)?;
    let forged_kernel = tape.value(w).clone();
    let mut tensors = original.tensors();
    tensors.insert(target.clone(), forged_kernel);
    let mut forged = Model::from_parts(spec.clone(), tensors, original.stats.clone(), original.activation)?;
    frozen_layer_audit(&original, &forged, &[target.as_str()])?;

    let extracted = uchida_extract(&forged, key)?;
    let report = WmAttackReport {
        acc: evaluate(&mut forged, test, None)?,
        sdr_new: sdr(&extracted, new_bits)?,
        bdr_original: bit_error_rate(&extracted, &key.bits)?,
        audit_passed: true,
    };
    Ok((forged, report))
}

/// Every tensor and running statistic outside `targets` must be
/// bit-identical between the two models.
pub fn frozen_layer_audit(before: &Model, after: &Model, targets: &[&str]) -> Result<()> {
    let (a, b) = (before.tensors(), after.tensors());
    if a.keys().ne(b.keys()) {
        return Err(Error::Contract("tensor inventory changed".into()));
    }
    for (name, t) in &a {
        if targets.contains(&name.as_str()) {
            continue;
        }
        let same = t.shape() == b[name].shape() && t.data().iter().zip(b[name].data()).all(|(x, y)| x.to_bits() == y.to_bits());
        if !same {
            return Err(Error::Contract(format!("non-target tensor `{name}` was modified")));
        }
    }
    for (key, s) in &before.stats {
        let o = &after.stats[key];
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        if bits(&s.mean) != bits(&o.mean) || bits(&s.var) != bits(&o.var) {
            return Err(Error::Contract(format!("running statistics `{key}` were modified")));
        }
    }
    Ok(())
}
