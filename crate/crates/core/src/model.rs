//! Desk-scale convolutional classifiers whose normalization sites can run
//! with learned affine factors, passport-derived factors, or attack blocks.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use forge_autodiff::{NormPhase, ParamId, ParamStore, RunningStats, Tape, Tensor, Var, BN_EPS, BN_MOMENTUM};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::archive::{Archive, CHECKPOINT_MAGIC};
use crate::attack::{self, Activation, BlockKind};
use crate::error::{Error, Result};
use crate::passport::{derive_affine_on_tape, PassportSet};
use crate::rng::substream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    ToyAlexNet,
    MiniResNet,
}

impl FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "alexnet" | "toyalexnet" | "toy-alexnet" => Ok(Arch::ToyAlexNet),
            "resnet" | "miniresnet" | "mini-resnet" => Ok(Arch::MiniResNet),
            _ => Err(Error::Config(format!("unknown architecture `{s}` (alexnet, resnet)"))),
        }
    }
}

/// Which normalization sites carry passports.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SiteSelect {
    None,
    First(usize),
    Last(usize),
    Explicit(Vec<usize>),
}

impl FromStr for SiteSelect {
    type Err = Error;
    /// `none`, `first-k`, `last-k`, or a comma list of indices.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let count = |v: &str| v.parse::<usize>().map_err(|_| Error::Config(format!("bad site count in `{s}`")));
        if s.is_empty() || s == "none" {
            Ok(SiteSelect::None)
        } else if let Some(k) = s.strip_prefix("first-") {
            Ok(SiteSelect::First(count(k)?))
        } else if let Some(k) = s.strip_prefix("last-") {
            Ok(SiteSelect::Last(count(k)?))
        } else {
            s.split(',').map(|v| count(v.trim())).collect::<Result<_>>().map(SiteSelect::Explicit)
        }
    }
}

impl fmt::Display for SiteSelect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SiteSelect::None => write!(f, "none"),
            SiteSelect::First(k) => write!(f, "first-{k}"),
            SiteSelect::Last(k) => write!(f, "last-{k}"),
            SiteSelect::Explicit(v) => {
                let s: Vec<String> = v.iter().map(|i| i.to_string()).collect();
                write!(f, "{}", s.join(","))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    /// `[C, H, W]` of one input image.
    pub in_shape: [usize; 3],
    pub num_classes: usize,
    /// Channel count of the first stage; later stages scale it.
    pub width: usize,
    /// Sorted indices of the passport sites.
    pub passport_sites: Vec<usize>,
}

/// Geometry of the 3x3 convolution feeding a normalization site.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SiteGeom {
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub padding: usize,
    pub kernel: usize,
    /// Spatial size of the conv's input feature map.
    pub in_hw: (usize, usize),
}

/// Projection shortcut of a residual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShortcutGeom {
    pub block: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

const ALEX_MULT: [usize; 5] = [1, 2, 4, 4, 4];
const ALEX_STRIDE: [usize; 5] = [1, 2, 1, 2, 1];
pub const RESNET_BLOCKS: usize = 8;

fn out_hw(hw: (usize, usize), stride: usize) -> (usize, usize) {
    // 3x3, padding 1: (H + 2 - 3) / s + 1
    ((hw.0 - 1) / stride + 1, (hw.1 - 1) / stride + 1)
}

impl ModelSpec {
    pub fn new(arch: Arch, in_shape: [usize; 3], num_classes: usize, width: usize, sites: &SiteSelect) -> Result<Self> {
        let mut spec = ModelSpec { arch, in_shape, num_classes, width, passport_sites: Vec::new() };
        if in_shape.iter().any(|&d| d == 0) || num_classes < 2 || width == 0 {
            return Err(Error::InvalidSpec(format!("in_shape {in_shape:?}, {num_classes} classes, width {width}")));
        }
        let n = spec.num_sites();
        let chosen: BTreeSet<usize> = match sites {
            SiteSelect::None => BTreeSet::new(),
            SiteSelect::First(k) | SiteSelect::Last(k) if *k > n => {
                return Err(Error::InvalidSpec(format!("{sites} asks for more than the {n} norm sites")))
            }
            SiteSelect::First(k) => (0..*k).collect(),
            SiteSelect::Last(k) => (n - k..n).collect(),
            SiteSelect::Explicit(v) => v.iter().copied().collect(),
        };
        if let Some(&bad) = chosen.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidSpec(format!("passport site {bad} out of range (0..{n})")));
        }
        spec.passport_sites = chosen.into_iter().collect();
        Ok(spec)
    }

    pub fn num_sites(&self) -> usize {
        match self.arch {
            Arch::ToyAlexNet => ALEX_MULT.len(),
            Arch::MiniResNet => 1 + 2 * RESNET_BLOCKS,
        }
    }

    pub fn is_passport_site(&self, site: usize) -> bool {
        self.passport_sites.binary_search(&site).is_ok()
    }

    /// Geometry of every site, in index order.
    pub fn sites(&self) -> Vec<SiteGeom> {
        let [c, h, w] = self.in_shape;
        let mut hw = (h, w);
        let mut cin = c;
        let mut out = Vec::with_capacity(self.num_sites());
        let mut push = |cin: usize, cout: usize, stride: usize, hw: &mut (usize, usize)| {
            out.push(SiteGeom { cin, cout, stride, padding: 1, kernel: 3, in_hw: *hw });
            *hw = out_hw(*hw, stride);
        };
        match self.arch {
            Arch::ToyAlexNet => {
                for (m, s) in ALEX_MULT.iter().zip(ALEX_STRIDE) {
                    push(cin, self.width * m, s, &mut hw);
                    cin = self.width * m;
                }
            }
            Arch::MiniResNet => {
                push(cin, self.width, 1, &mut hw);
                cin = self.width;
                for b in 0..RESNET_BLOCKS {
                    let (cout, stride) = resnet_block(self.width, b);
                    push(cin, cout, stride, &mut hw);
                    push(cout, cout, 1, &mut hw);
                    cin = cout;
                }
            }
        }
        out
    }

    pub fn shortcuts(&self) -> Vec<ShortcutGeom> {
        if self.arch != Arch::MiniResNet {
            return Vec::new();
        }
        let mut cin = self.width;
        let mut out = Vec::new();
        for b in 0..RESNET_BLOCKS {
            let (cout, stride) = resnet_block(self.width, b);
            if stride != 1 || cin != cout {
                out.push(ShortcutGeom { block: b, cin, cout, stride });
            }
            cin = cout;
        }
        out
    }

    /// Width of the pooled feature vector fed to the classifier.
    pub fn feature_dim(&self) -> usize {
        self.sites().last().map(|s| s.cout).unwrap_or(0)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn spec_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(&Sha256::digest(bytes)[..16])
    }
}

/// Output channels and stride of residual block `b` (two blocks per stage).
fn resnet_block(width: usize, b: usize) -> (usize, usize) {
    let stage = b / 2;
    (width << stage, if stage > 0 && b % 2 == 0 { 2 } else { 1 })
}

/// How a normalization site obtains its scale and bias.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SiteMode {
    Plain,
    Passport,
    /// Trainable raw scale and bias, with an optional block on the scale.
    Attack { block: Option<(BlockKind, usize)> },
}

/// Per-call forward options.
#[derive(Clone, Copy)]
pub struct ForwardOpts<'a> {
    pub phase: NormPhase,
    pub passports: Option<&'a PassportSet>,
    /// Use this variable as the weight of site conv `i` instead of binding it.
    pub conv_override: Option<(usize, Var)>,
}

impl<'a> ForwardOpts<'a> {
    pub fn train(passports: Option<&'a PassportSet>) -> Self {
        ForwardOpts { phase: NormPhase::Train, passports, conv_override: None }
    }

    pub fn eval(passports: Option<&'a PassportSet>) -> Self {
        ForwardOpts { phase: NormPhase::Eval, passports, conv_override: None }
    }
}

pub struct ForwardOut {
    pub logits: Var,
    /// Effective scale factors per site, as applied.
    pub gammas: Vec<Var>,
    pub betas: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
    /// Running statistics keyed `norm{i}` and `shortcut{b}`.
    pub stats: BTreeMap<String, RunningStats>,
    /// Nonlinearity inside attack blocks.
    pub activation: Activation,
    modes: Vec<SiteMode>,
}

pub fn conv_name(site: usize) -> String {
    format!("conv{site}.weight")
}

fn norm_key(site: usize) -> String {
    format!("norm{site}")
}

fn shortcut_key(block: usize) -> String {
    format!("shortcut{block}")
}

impl Model {
    /// Fresh model: He-uniform conv and linear weights, zero biases, plain
    /// affine `gamma = 1`, `beta = 0`.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = substream(seed, "init");
        let mut he = |shape: &[usize], fan_in: usize| {
            let bound = (6.0 / fan_in as f32).sqrt();
            let n: usize = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).expect("positive dims")
        };
        let mut tensors = BTreeMap::new();
        let mut stats = BTreeMap::new();
        for (i, g) in spec.sites().iter().enumerate() {
            tensors.insert(conv_name(i), he(&[g.cout, g.cin, g.kernel, g.kernel], g.cin * g.kernel * g.kernel));
            if !spec.is_passport_site(i) {
                tensors.insert(format!("norm{i}.gamma"), Tensor::ones(&[g.cout]));
                tensors.insert(format!("norm{i}.beta"), Tensor::zeros(&[g.cout]));
            }
            stats.insert(norm_key(i), RunningStats::new(g.cout));
        }
        for s in spec.shortcuts() {
            let key = shortcut_key(s.block);
            tensors.insert(format!("{key}.weight"), he(&[s.cout, s.cin, 1, 1], s.cin));
            tensors.insert(format!("{key}.gamma"), Tensor::ones(&[s.cout]));
            tensors.insert(format!("{key}.beta"), Tensor::zeros(&[s.cout]));
            stats.insert(key, RunningStats::new(s.cout));
        }
        let f = spec.feature_dim();
        tensors.insert("fc.weight".into(), he(&[f, spec.num_classes], f));
        tensors.insert("fc.bias".into(), Tensor::zeros(&[spec.num_classes]));
        Self::from_parts(spec.clone(), tensors, stats, Activation::LeakyRelu)
    }

    /// Assemble a model from named tensors; each site's mode is inferred
    /// from which names are present, and the inventory must be exact.
    pub fn from_parts(
        spec: ModelSpec,
        tensors: BTreeMap<String, Tensor>,
        stats: BTreeMap<String, RunningStats>,
        activation: Activation,
    ) -> Result<Self> {
        if let Some(name) = tensors.keys().find(|n| n.contains("passport")) {
            return Err(Error::PassportLeak(name.clone()));
        }
        let mut modes = Vec::with_capacity(spec.num_sites());
        for i in 0..spec.num_sites() {
            let mode = if tensors.contains_key(&format!("attack{i}.gamma")) {
                SiteMode::Attack { block: attack::infer_block(&tensors, i)? }
            } else if tensors.contains_key(&format!("norm{i}.gamma")) {
                SiteMode::Plain
            } else {
                SiteMode::Passport
            };
            if mode == SiteMode::Passport && !spec.is_passport_site(i) {
                return Err(Error::InvalidSpec(format!("site {i} has no affine factors but is not a passport site")));
            }
            modes.push(mode);
        }
        let model = Model { spec, store: ParamStore::new(), stats, activation, modes };
        let expected = model.expected_names()?;
        let present: BTreeSet<&String> = tensors.keys().collect();
        if let Some(missing) = expected.iter().find(|(n, _)| !present.contains(n)) {
            return Err(Error::format("checkpoint", format!("missing tensor `{}`", missing.0)));
        }
        if let Some(extra) = present.iter().find(|n| !expected.contains_key(**n)) {
            return Err(Error::format("checkpoint", format!("unexpected tensor `{extra}`")));
        }
        for (name, shape) in &expected {
            if tensors[name].shape() != shape.as_slice() {
                return Err(Error::format(
                    "checkpoint",
                    format!("`{name}` has shape {:?}, spec needs {shape:?}", tensors[name].shape()),
                ));
            }
        }
        for (key, c) in model.expected_stats() {
            match model.stats.get(&key) {
                Some(s) if s.channels() == c => {}
                _ => return Err(Error::format("checkpoint", format!("running statistics `{key}` missing or misshaped"))),
            }
        }
        if model.stats.len() != model.expected_stats().len() {
            return Err(Error::format("checkpoint", "unexpected running statistics"));
        }
        let mut model = model;
        for (name, t) in tensors {
            model.store.insert(name, t, true)?;
        }
        Ok(model)
    }

    fn expected_stats(&self) -> Vec<(String, usize)> {
        let mut v: Vec<(String, usize)> =
            self.spec.sites().iter().enumerate().map(|(i, g)| (norm_key(i), g.cout)).collect();
        v.extend(self.spec.shortcuts().iter().map(|s| (shortcut_key(s.block), s.cout)));
        v
    }

    /// Every tensor name the current modes call for, with its shape.
    fn expected_names(&self) -> Result<BTreeMap<String, Vec<usize>>> {
        let mut m = BTreeMap::new();
        for (i, g) in self.spec.sites().iter().enumerate() {
            m.insert(conv_name(i), vec![g.cout, g.cin, g.kernel, g.kernel]);
            match &self.modes[i] {
                SiteMode::Plain => {
                    m.insert(format!("norm{i}.gamma"), vec![g.cout]);
                    m.insert(format!("norm{i}.beta"), vec![g.cout]);
                }
                SiteMode::Passport => {}
                SiteMode::Attack { block } => {
                    m.insert(format!("attack{i}.gamma"), vec![g.cout]);
                    m.insert(format!("attack{i}.beta"), vec![g.cout]);
                    if let Some((kind, depth)) = block {
                        let layout = attack::block_layout(*kind, g.cout, *depth, attack::default_hidden(*kind, g.cout))?;
                        for (name, shape) in layout {
                            m.insert(attack::block_param_name(i, *kind, &name), shape);
                        }
                    }
                }
            }
        }
        for s in self.spec.shortcuts() {
            let key = shortcut_key(s.block);
            m.insert(format!("{key}.weight"), vec![s.cout, s.cin, 1, 1]);
            m.insert(format!("{key}.gamma"), vec![s.cout]);
            m.insert(format!("{key}.beta"), vec![s.cout]);
        }
        let f = self.spec.feature_dim();
        m.insert("fc.weight".into(), vec![f, self.spec.num_classes]);
        m.insert("fc.bias".into(), vec![self.spec.num_classes]);
        Ok(m)
    }

    pub fn mode(&self, site: usize) -> &SiteMode {
        &self.modes[site]
    }

    pub fn modes(&self) -> &[SiteMode] {
        &self.modes
    }

    /// Copy of every parameter by name.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.store.iter().map(|(_, p)| (p.name().to_string(), p.value.clone())).collect()
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.store
            .by_name(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::InvalidArgument(format!("model has no tensor `{name}`")))
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self.id(name)?;
        if self.store.value(id).shape() != value.shape() {
            return Err(Error::InvalidArgument(format!("shape mismatch writing `{name}`")));
        }
        self.store.get_mut(id).value = value;
        Ok(())
    }

    fn id(&self, name: &str) -> Result<ParamId> {
        self.store.id(name).ok_or_else(|| Error::InvalidArgument(format!("model has no tensor `{name}`")))
    }

    /// Mark exactly the parameters accepted by `keep` as trainable.
    pub fn set_trainable(&mut self, keep: impl Fn(&str) -> bool) {
        for p in self.store.iter_mut() {
            p.trainable = keep(p.name());
            p.grad = None;
            p.reset_velocity();
        }
    }

    fn bind(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        Ok(tape.bind(&self.store, self.id(name)?))
    }

    pub fn forward(&mut self, tape: &mut Tape, x: Var, opts: &ForwardOpts) -> Result<ForwardOut> {
        let sites = self.spec.sites();
        let mut gammas = Vec::with_capacity(sites.len());
        let mut betas = Vec::with_capacity(sites.len());
        let mut h = x;
        match self.spec.arch {
            Arch::ToyAlexNet => {
                for i in 0..sites.len() {
                    h = self.site(tape, h, i, &sites[i], opts, &mut gammas, &mut betas)?;
                    h = tape.relu(h);
                }
            }
            Arch::MiniResNet => {
                h = self.site(tape, h, 0, &sites[0], opts, &mut gammas, &mut betas)?;
                h = tape.relu(h);
                let shortcuts: BTreeMap<usize, ShortcutGeom> =
                    self.spec.shortcuts().into_iter().map(|s| (s.block, s)).collect();
                for b in 0..RESNET_BLOCKS {
                    let (i1, i2) = (1 + 2 * b, 2 + 2 * b);
                    let mut y = self.site(tape, h, i1, &sites[i1], opts, &mut gammas, &mut betas)?;
                    y = tape.relu(y);
                    y = self.site(tape, y, i2, &sites[i2], opts, &mut gammas, &mut betas)?;
                    let skip = match shortcuts.get(&b) {
                        Some(s) => self.shortcut(tape, h, s, opts.phase)?,
                        None => h,
                    };
                    y = tape.add(y, skip)?;
                    h = tape.relu(y);
                }
            }
        }
        let pooled = tape.global_avg_pool(h)?;
        let w = self.bind(tape, "fc.weight")?;
        let bias = self.bind(tape, "fc.bias")?;
        let z = tape.matmul(pooled, w)?;
        let logits = tape.add(z, bias)?;
        Ok(ForwardOut { logits, gammas, betas })
    }

    #[allow(clippy::too_many_arguments)]
    fn site(
        &mut self,
        tape: &mut Tape,
        x: Var,
        i: usize,
        g: &SiteGeom,
        opts: &ForwardOpts,
        gammas: &mut Vec<Var>,
        betas: &mut Vec<Var>,
    ) -> Result<Var> {
        let w = match opts.conv_override {
            Some((j, v)) if j == i => v,
            _ => self.bind(tape, &conv_name(i))?,
        };
        let y = tape.conv2d(x, w, g.stride, g.padding)?;
        let stats = self.stats.get_mut(&norm_key(i)).expect("inventory checked");
        let y = tape.batch_norm2d(y, stats, opts.phase, BN_MOMENTUM, BN_EPS)?;
        let (gamma, beta) = self.site_affine(tape, i, w, g, opts)?;
        gammas.push(gamma);
        betas.push(beta);
        Ok(tape.channel_affine(y, gamma, beta)?)
    }

    fn site_affine(&self, tape: &mut Tape, i: usize, w: Var, g: &SiteGeom, opts: &ForwardOpts) -> Result<(Var, Var)> {
        match &self.modes[i] {
            SiteMode::Plain => Ok((self.bind(tape, &format!("norm{i}.gamma"))?, self.bind(tape, &format!("norm{i}.beta"))?)),
            SiteMode::Passport => {
                let p = opts.passports.and_then(|p| p.get(&i)).ok_or(Error::MissingPassport(i))?;
                derive_affine_on_tape(tape, w, p, g.stride, g.padding)
            }
            SiteMode::Attack { block } => {
                let raw = self.bind(tape, &format!("attack{i}.gamma"))?;
                let beta = self.bind(tape, &format!("attack{i}.beta"))?;
                let gamma = match block {
                    None => raw,
                    Some((kind, depth)) => {
                        let mut layers = Vec::with_capacity(*depth);
                        for l in 0..*depth {
                            let wn = attack::block_param_name(i, *kind, &format!("l{l}.weight"));
                            let bn = attack::block_param_name(i, *kind, &format!("l{l}.bias"));
                            layers.push((self.bind(tape, &wn)?, self.bind(tape, &bn)?));
                        }
                        attack::block_forward(tape, *kind, self.activation, raw, &layers)?
                    }
                };
                Ok((gamma, beta))
            }
        }
    }

    fn shortcut(&mut self, tape: &mut Tape, x: Var, s: &ShortcutGeom, phase: NormPhase) -> Result<Var> {
        let key = shortcut_key(s.block);
        let w = self.bind(tape, &format!("{key}.weight"))?;
        let gamma = self.bind(tape, &format!("{key}.gamma"))?;
        let beta = self.bind(tape, &format!("{key}.beta"))?;
        let y = tape.conv2d(x, w, s.stride, 0)?;
        let stats = self.stats.get_mut(&key).expect("inventory checked");
        let y = tape.batch_norm2d(y, stats, phase, BN_MOMENTUM, BN_EPS)?;
        Ok(tape.channel_affine(y, gamma, beta)?)
    }

    /// Eval-mode logits for a batch, without recording gradients.
    pub fn logits(&mut self, batch: &Tensor, passports: Option<&PassportSet>) -> Result<Tensor> {
        let frozen: Vec<bool> = self.store.iter().map(|(_, p)| p.trainable).collect();
        self.store.set_all_trainable(false);
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let out = self.forward(&mut tape, x, &ForwardOpts::eval(passports));
        for (p, t) in self.store.iter_mut().zip(frozen) {
            p.trainable = t;
        }
        Ok(tape.value(out?.logits).clone())
    }

    /// Effective `(gamma, beta)` at every site as the forward pass applies them.
    pub fn site_affines(&mut self, passports: Option<&PassportSet>) -> Result<Vec<(Tensor, Tensor)>> {
        let [c, h, w] = self.spec.in_shape;
        let probe = Tensor::zeros(&[2, c, h, w]);
        let frozen: Vec<bool> = self.store.iter().map(|(_, p)| p.trainable).collect();
        self.store.set_all_trainable(false);
        let mut tape = Tape::new();
        let x = tape.constant(probe);
        let out = self.forward(&mut tape, x, &ForwardOpts::eval(passports));
        for (p, t) in self.store.iter_mut().zip(frozen) {
            p.trainable = t;
        }
        let out = out?;
        Ok(out.gammas.iter().zip(&out.betas).map(|(g, b)| (tape.value(*g).clone(), tape.value(*b).clone())).collect())
    }

    /// Rebuild with the given sites switched to plain affine factors.
    pub fn with_plain_affine(&self, affine: &BTreeMap<usize, (Tensor, Tensor)>) -> Result<Model> {
        let mut tensors: BTreeMap<String, Tensor> =
            self.tensors().into_iter().filter(|(n, _)| !affine.keys().any(|i| n.starts_with(&format!("attack{i}.")))).collect();
        for (i, (g, b)) in affine {
            tensors.insert(format!("norm{i}.gamma"), g.clone());
            tensors.insert(format!("norm{i}.beta"), b.clone());
        }
        Model::from_parts(self.spec.clone(), tensors, self.stats.clone(), self.activation)
    }

    pub fn num_scalars(&self) -> usize {
        self.store.num_scalars()
    }

    /// Serialize weights and running statistics. Passports are never part of
    /// a model and so can never be written.
    pub fn save_checkpoint(&self, seed: u64, epoch: usize) -> Vec<u8> {
        let mut tensors = self.tensors();
        for (key, s) in &self.stats {
            tensors.insert(format!("{key}.running_mean"), Tensor::new(vec![s.channels()], s.mean.clone()).unwrap());
            tensors.insert(format!("{key}.running_var"), Tensor::new(vec![s.channels()], s.var.clone()).unwrap());
        }
        let mut meta = json!({"spec_hash": self.spec.spec_hash(), "seed": seed, "epoch": epoch});
        if self.modes.iter().any(|m| matches!(m, SiteMode::Attack { block: Some(_) })) {
            meta["block_activation"] = json!(self.activation);
        }
        Archive::new(tensors, meta).to_bytes(CHECKPOINT_MAGIC)
    }

    pub fn load_checkpoint(bytes: &[u8], spec: &ModelSpec) -> Result<(Model, CheckpointMeta)> {
        let archive = Archive::from_bytes(bytes, CHECKPOINT_MAGIC)?;
        let meta: CheckpointMeta = serde_json::from_value(archive.meta.clone())?;
        if meta.spec_hash != spec.spec_hash() {
            return Err(Error::SpecMismatch { expected: spec.spec_hash(), found: meta.spec_hash });
        }
        let activation = match archive.meta.get("block_activation") {
            Some(v) => serde_json::from_value(v.clone())?,
            None => Activation::LeakyRelu,
        };
        let mut tensors = archive.tensors;
        let mut stats = BTreeMap::new();
        let keys: Vec<String> = tensors.keys().filter_map(|n| n.strip_suffix(".running_mean").map(String::from)).collect();
        for key in keys {
            let mean = tensors.remove(&format!("{key}.running_mean")).unwrap();
            let var = tensors
                .remove(&format!("{key}.running_var"))
                .ok_or_else(|| Error::format("checkpoint", format!("`{key}` has a mean but no variance")))?;
            if mean.shape() != var.shape() || mean.rank() != 1 {
                return Err(Error::format("checkpoint", format!("`{key}` statistics misshaped")));
            }
            stats.insert(key, RunningStats { mean: mean.into_data(), var: var.into_data(), initialized: true });
        }
        let model = Model::from_parts(spec.clone(), tensors, stats, activation)?;
        Ok((model, meta))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec_hash: String,
    pub seed: u64,
    pub epoch: usize,
}
