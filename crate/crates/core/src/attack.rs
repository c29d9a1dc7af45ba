//! Substitution attack on passport sites: the sites' affine factors are
//! re-learned from a small data budget while every weight stays frozen,
//! optionally routing the scale through a residual perceptron block.

use std::collections::BTreeMap;
use std::str::FromStr;

use forge_autodiff::{NormPhase, Tape, Tensor, Var, LEAKY_RELU_SLOPE};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{bdr, sign_coincidence};
use crate::model::{ForwardOpts, Model, ModelSpec, SiteMode};
use crate::passport::{PassportSet, SignatureSet};
use crate::rng::substream;
use crate::train::{evaluate, fit, EpochRecord, LoopConfig, Optimizer};

/// Hidden width of each per-channel perceptron.
pub const IERB_HIDDEN: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// One tiny perceptron per channel.
    Ierb,
    /// One perceptron shared across channels.
    Cerb,
}

/// What the attack inserts at a passport site.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Ierb,
    Cerb,
    /// Optimize scale and bias directly.
    Plain,
}

impl AttackKind {
    pub fn block(self) -> Option<BlockKind> {
        match self {
            AttackKind::Ierb => Some(BlockKind::Ierb),
            AttackKind::Cerb => Some(BlockKind::Cerb),
            AttackKind::Plain => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Ierb => "ierb",
            AttackKind::Cerb => "cerb",
            AttackKind::Plain => "plain",
        }
    }
}

impl FromStr for AttackKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ierb" => Ok(AttackKind::Ierb),
            "cerb" => Ok(AttackKind::Cerb),
            "plain" => Ok(AttackKind::Plain),
            _ => Err(Error::Config(format!("unknown block `{s}` (ierb, cerb, plain)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::LeakyRelu => "leaky_relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }

    fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(match self {
            Activation::LeakyRelu => tape.leaky_relu(x, LEAKY_RELU_SLOPE)?,
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
        })
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "leaky_relu" | "lrelu" => Ok(Activation::LeakyRelu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            _ => Err(Error::Config(format!("unknown activation `{s}` (leaky_relu, tanh, sigmoid)"))),
        }
    }
}

/// Hidden width for a block over `c` channels.
pub fn default_hidden(kind: BlockKind, c: usize) -> usize {
    match kind {
        BlockKind::Ierb => IERB_HIDDEN,
        BlockKind::Cerb => (c / 8).max(1),
    }
}

pub fn block_param_name(site: usize, kind: BlockKind, suffix: &str) -> String {
    let k = match kind {
        BlockKind::Ierb => "ierb",
        BlockKind::Cerb => "cerb",
    };
    format!("attack{site}.{k}.{suffix}")
}

/// Parameter names (relative, `l{k}.weight` / `l{k}.bias`) and shapes of a
/// block with `depth` linear layers over `c` channels.
pub fn block_layout(kind: BlockKind, c: usize, depth: usize, hidden: usize) -> Result<Vec<(String, Vec<usize>)>> {
    if depth < 2 {
        return Err(Error::InvalidArgument(format!("block depth {depth} must be at least 2")));
    }
    let mut out = Vec::with_capacity(2 * depth);
    for l in 0..depth {
        let (w, b) = match (kind, l) {
            (BlockKind::Ierb, 0) => (vec![c, hidden], vec![c, hidden]),
            (BlockKind::Ierb, l) if l == depth - 1 => (vec![c, hidden], vec![c]),
            (BlockKind::Ierb, _) => (vec![c, hidden, hidden], vec![c, hidden]),
            (BlockKind::Cerb, 0) => (vec![c, hidden], vec![hidden]),
            (BlockKind::Cerb, l) if l == depth - 1 => (vec![hidden, c], vec![c]),
            (BlockKind::Cerb, _) => (vec![hidden, hidden], vec![hidden]),
        };
        out.push((format!("l{l}.weight"), w));
        out.push((format!("l{l}.bias"), b));
    }
    Ok(out)
}

/// Block kind and depth at `site`, from the tensor names present.
pub(crate) fn infer_block(tensors: &BTreeMap<String, Tensor>, site: usize) -> Result<Option<(BlockKind, usize)>> {
    let mut found = None;
    for kind in [BlockKind::Ierb, BlockKind::Cerb] {
        let prefix = block_param_name(site, kind, "");
        let depth = tensors.keys().filter(|n| n.starts_with(&prefix) && n.ends_with(".weight")).count();
        if depth > 0 {
            if found.is_some() {
                return Err(Error::format("checkpoint", format!("site {site} carries two kinds of block")));
            }
            found = Some((kind, depth));
        }
    }
    Ok(found)
}

/// Fresh block parameters: small-normal first layer, Kaiming-uniform
/// middle layers, zero last layer, so the block starts as the identity.
pub fn init_block(kind: BlockKind, c: usize, depth: usize, rng: &mut impl Rng) -> Result<Vec<(String, Tensor)>> {
    let hidden = default_hidden(kind, c);
    let layout = block_layout(kind, c, depth, hidden)?;
    Ok(layout
        .into_iter()
        .map(|(name, shape)| {
            let l: usize = name[1..name.find('.').unwrap()].parse().unwrap();
            let t = if !name.ends_with("weight") || l == depth - 1 {
                Tensor::zeros(&shape)
            } else if l == 0 {
                Tensor::randn(&shape, 0.01, rng)
            } else {
                let bound = (6.0 / hidden as f32).sqrt();
                Tensor::uniform(&shape, -bound, bound, rng)
            };
            (name, t)
        })
        .collect())
}

/// Block output `gamma + mlp(gamma)` for a `[C]` scale vector. `layers` are
/// `(weight, bias)` pairs shaped per [`block_layout`].
pub fn block_forward(tape: &mut Tape, kind: BlockKind, act: Activation, gamma: Var, layers: &[(Var, Var)]) -> Result<Var> {
    let c = tape.value(gamma).numel();
    if layers.len() < 2 {
        return Err(Error::InvalidArgument("a block needs at least two layers".into()));
    }
    let last = layers.len() - 1;
    let out = match kind {
        BlockKind::Ierb => {
            let g = tape.reshape(gamma, &[c, 1])?;
            let (w0, b0) = layers[0];
            let a = tape.mul(g, w0)?;
            let a = tape.add(a, b0)?;
            let mut a = act.apply(tape, a)?;
            for &(w, b) in &layers[1..last] {
                let h = tape.shape(a)[1];
                let col = tape.reshape(a, &[c, h, 1])?;
                let prod = tape.mul(col, w)?;
                let z = tape.sum_axis(prod, 1)?;
                let z = tape.add(z, b)?;
                a = act.apply(tape, z)?;
            }
            let (w, b) = layers[last];
            let prod = tape.mul(a, w)?;
            let z = tape.sum_axis(prod, 1)?;
            tape.add(z, b)?
        }
        BlockKind::Cerb => {
            let g = tape.reshape(gamma, &[1, c])?;
            let z = cerb_rows(tape, act, g, layers)?;
            tape.reshape(z, &[c])?
        }
    };
    if tape.value(out).numel() != c {
        return Err(Error::InvalidArgument("block output does not match the scale length".into()));
    }
    Ok(tape.add(out, gamma)?)
}

/// The shared perceptron applied to every row of `x: [R, C]`, without the
/// skip connection.
pub fn cerb_rows(tape: &mut Tape, act: Activation, x: Var, layers: &[(Var, Var)]) -> Result<Var> {
    let last = layers.len().checked_sub(1).ok_or_else(|| Error::InvalidArgument("empty block".into()))?;
    let mut a = x;
    for (l, &(w, b)) in layers.iter().enumerate() {
        let z = tape.matmul(a, w)?;
        let z = tape.add(z, b)?;
        a = if l == last { z } else { act.apply(tape, z)? };
    }
    Ok(a)
}

/// Which passport sites receive a block; the rest are attacked directly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockSites {
    All,
    First(usize),
}

impl FromStr for BlockSites {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(BlockSites::All);
        }
        s.strip_prefix("first-")
            .and_then(|n| n.parse().ok())
            .map(BlockSites::First)
            .ok_or_else(|| Error::Config(format!("block sites `{s}` is neither `all` nor `first-k`")))
    }
}

impl std::fmt::Display for BlockSites {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BlockSites::All => f.write_str("all"),
            BlockSites::First(n) => write!(f, "first-{n}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub activation: Activation,
    /// Linear layers per block.
    pub depth: usize,
    pub block_sites: BlockSites,
    pub optim: LoopConfig,
    pub seed: u64,
    /// Accuracy band for an indistinguishable forgery.
    pub epsilon: f32,
    /// Minimum bit dissimilarity for a distinct forgery.
    pub delta: f32,
    /// Evaluate on the test set every this many epochs; the last epoch
    /// always is.
    pub eval_every: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            kind: AttackKind::Cerb,
            activation: Activation::LeakyRelu,
            depth: 2,
            block_sites: BlockSites::All,
            optim: LoopConfig { epochs: 40, batch_size: 64, lr: 0.05, momentum: 0.9, weight_decay: 0.0, cosine: true, clip_norm: Some(5.0), warmup_epochs: 0, optimizer: Optimizer::Sgd },
            seed: 0,
            epsilon: 0.05,
            delta: 0.2,
            eval_every: 1,
        }
    }
}

/// Result of an attack run.
#[derive(Clone, Debug)]
pub struct AttackOutcome {
    /// The weights with attack sites in place of the passport sites.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub epochs_trained: usize,
}

impl AttackOutcome {
    /// Substitute `(gamma'', beta)` per attacked site.
    pub fn extract(&mut self) -> Result<BTreeMap<usize, (Tensor, Tensor)>> {
        if self.epochs_trained == 0 {
            return Err(Error::InvalidArgument("attack blocks were never trained; nothing to extract".into()));
        }
        substitute_factors(&mut self.model)
    }

    /// Plain-affine model that uses the extracted factors and no blocks.
    pub fn materialize(&mut self) -> Result<Model> {
        let f = self.extract()?;
        self.model.with_plain_affine(&f)
    }
}

/// Scale and bias at every attack site as the forward pass applies them.
pub fn substitute_factors(model: &mut Model) -> Result<BTreeMap<usize, (Tensor, Tensor)>> {
    let sites: Vec<usize> =
        model.modes().iter().enumerate().filter(|(_, m)| matches!(m, SiteMode::Attack { .. })).map(|(i, _)| i).collect();
    let all = model.site_affines(None)?;
    Ok(sites.into_iter().map(|i| (i, all[i].clone())).collect())
}

/// Swap each passport site of a passport-free model for an attack site:
/// scale 1, bias 0, and a fresh block where configured.
pub fn prepare_attack_model(model: &Model, cfg: &AttackConfig) -> Result<Model> {
    let spec = &model.spec;
    let mut tensors = model.tensors();
    let mut rng = substream(cfg.seed, "attack/init");
    let sites = spec.sites();
    for (rank, &i) in spec.passport_sites.iter().enumerate() {
        if model.mode(i) != &SiteMode::Passport {
            return Err(Error::InvalidArgument(format!("site {i} is not a bare passport site")));
        }
        let c = sites[i].cout;
        tensors.insert(format!("attack{i}.gamma"), Tensor::ones(&[c]));
        tensors.insert(format!("attack{i}.beta"), Tensor::zeros(&[c]));
        let blocked = match cfg.block_sites {
            BlockSites::All => true,
            BlockSites::First(n) => rank < n,
        };
        if let (Some(kind), true) = (cfg.kind.block(), blocked) {
            for (name, t) in init_block(kind, c, cfg.depth, &mut rng)? {
                tensors.insert(block_param_name(i, kind, &name), t);
            }
        }
    }
    Model::from_parts(spec.clone(), tensors, model.stats.clone(), cfg.activation)
}

/// Attack a released checkpoint. Normalization runs on the stored running
/// statistics; only attack-site parameters are updated, with cross-entropy
/// on `attack_data`. `reference`, when given, is the owner's signature set
/// and is used only to report bit dissimilarity per epoch.
pub fn run_attack(
    checkpoint: &[u8],
    spec: &ModelSpec,
    attack_data: &Dataset,
    test: &Dataset,
    cfg: &AttackConfig,
    reference: Option<&SignatureSet>,
) -> Result<AttackOutcome> {
    let (released, _) = Model::load_checkpoint(checkpoint, spec)?;
    attack_model(&released, attack_data, test, cfg, reference)
}

/// Plain-attack baseline: scale and bias optimized with no block.
pub fn plain_attack(
    checkpoint: &[u8],
    spec: &ModelSpec,
    attack_data: &Dataset,
    test: &Dataset,
    cfg: &AttackConfig,
    reference: Option<&SignatureSet>,
) -> Result<AttackOutcome> {
    let cfg = AttackConfig { kind: AttackKind::Plain, ..cfg.clone() };
    run_attack(checkpoint, spec, attack_data, test, &cfg, reference)
}

pub fn attack_model(
    released: &Model,
    attack_data: &Dataset,
    test: &Dataset,
    cfg: &AttackConfig,
    reference: Option<&SignatureSet>,
) -> Result<AttackOutcome> {
    if released.spec.passport_sites.is_empty() {
        return Err(Error::InvalidArgument("model has no passport sites to attack".into()));
    }
    crate::data::ensure_disjoint_from_test(attack_data, test)?;
    let mut model = prepare_attack_model(released, cfg)?;
    model.set_trainable(|n| n.starts_with("attack"));
    let sites = model.spec.passport_sites.clone();
    let mut history = Vec::new();
    fit(
        &mut model,
        attack_data,
        &cfg.optim,
        cfg.seed,
        "attack/shuffle",
        |m, tape, x, y| {
            let opts = ForwardOpts { phase: NormPhase::Eval, passports: None, conv_override: None };
            let out = m.forward(tape, x, &opts)?;
            Ok(tape.cross_entropy(out.logits, y)?)
        },
        |m, epoch, train_loss| {
            if epoch % cfg.eval_every.max(1) != 0 && epoch != cfg.optim.epochs {
                return Ok(());
            }
            let test_acc = evaluate(m, test, None)?;
            let mut rates = Vec::new();
            if let Some(sigs) = reference {
                let f = substitute_factors(m)?;
                for i in &sites {
                    rates.push(bdr(f[i].0.data(), &sigs[i].as_f32())?);
                }
            }
            history.push(EpochRecord { epoch, train_loss, test_acc, bdr: rates });
            Ok(())
        },
    )?;
    model.set_trainable(|_| true);
    Ok(AttackOutcome { model, history, epochs_trained: cfg.optim.epochs })
}

/// Budget for re-training after sign flips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub site: usize,
    pub optim: LoopConfig,
    /// Also update every conv and linear weight, not just the site's affine.
    pub full_finetune: bool,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub flips: usize,
    pub acc: f32,
    pub coincidence: f32,
}

/// For each `k`, flip `k` randomly chosen signs of the authorized scale at
/// `cfg.site` (magnitudes and bias kept), retrain on `full_data`, and report
/// accuracy and sign agreement with the authorized scale.
pub fn sign_flip_sweep(
    protected: &mut Model,
    passports: &PassportSet,
    full_data: &Dataset,
    test: &Dataset,
    flip_counts: &[usize],
    cfg: &SweepConfig,
) -> Result<Vec<SweepPoint>> {
    let site = cfg.site;
    if !protected.spec.is_passport_site(site) {
        return Err(Error::InvalidArgument(format!("site {site} is not a passport site")));
    }
    let authorized = protected.site_affines(Some(passports))?;
    let c = authorized[site].0.numel();
    let mut points = Vec::with_capacity(flip_counts.len());
    for &k in flip_counts {
        if k > c {
            return Err(Error::InvalidArgument(format!("cannot flip {k} of {c} signs")));
        }
        let mut gamma = authorized[site].0.clone();
        let mut rng = substream(cfg.seed, &format!("sweep/flip/{k}"));
        for j in sample(&mut rng, c, k) {
            gamma.data_mut()[j] = -gamma.data()[j];
        }
        let mut fixed: BTreeMap<usize, (Tensor, Tensor)> =
            protected.spec.passport_sites.iter().map(|&i| (i, authorized[i].clone())).collect();
        fixed.insert(site, (gamma, authorized[site].1.clone()));
        let mut model = protected.with_plain_affine(&fixed)?;
        let gname = format!("norm{site}.gamma");
        let bname = format!("norm{site}.beta");
        if cfg.full_finetune {
            let fixed_sites: Vec<String> = fixed.keys().filter(|&&i| i != site).flat_map(|i| [format!("norm{i}.gamma"), format!("norm{i}.beta")]).collect();
            model.set_trainable(|n| !fixed_sites.iter().any(|f| f == n));
        } else {
            model.set_trainable(|n| n == gname || n == bname);
        }
        let phase = if cfg.full_finetune { NormPhase::Train } else { NormPhase::Eval };
        fit(
            &mut model,
            full_data,
            &cfg.optim,
            cfg.seed,
            &format!("sweep/shuffle/{k}"),
            |m, tape, x, y| {
                let opts = ForwardOpts { phase, passports: None, conv_override: None };
                let out = m.forward(tape, x, &opts)?;
                Ok(tape.cross_entropy(out.logits, y)?)
            },
            |_, _, _| Ok(()),
        )?;
        let acc = evaluate(&mut model, test, None)?;
        let coincidence = sign_coincidence(model.param(&gname)?.data(), authorized[site].0.data())?;
        points.push(SweepPoint { flips: k, acc, coincidence });
    }
    Ok(points)
}
