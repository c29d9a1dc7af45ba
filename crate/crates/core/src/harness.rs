//! Experiment configuration, run directories and reports.
//!
//! A run directory is `<out>/<command>-<label>-<group>/seed-<n>`, where
//! `group` hashes the resolved configuration without its seed list. Every
//! run writes `config.txt` (the resolved configuration for that seed) and
//! `metrics.csv`; reports are rebuilt from those two files alone.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{self, Activation, AttackConfig, AttackKind, BlockSites, SweepConfig, SweepPoint};
use crate::data::{disjoint_split, load_dataset, subset, synthetic, Dataset, DatasetKind, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::{Arch, Model, ModelSpec, SiteSelect};
use crate::passport::{load_passports, random_passport, save_passports, PassportSet, Signature, SignatureSet};
use crate::rng::substream;
use crate::train::{self, EmbedHyper, EpochRecord, LoopConfig, Optimizer, Verification};
use crate::watermark::{self, WatermarkKey, WmAttackConfig, WmAttackReport};

/// Environment variable naming the default data directory.
pub const DATA_ENV: &str = "PASSPORT_FORGE_DATA";

pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key { name, default, help }
}

/// Every recognised configuration key, in the order they are written out.
pub const KEYS: &[Key] = &[
    key("dataset", "synthetic", "synthetic, mnist or cifar10"),
    key("data_dir", "", "directory holding the dataset files; empty falls back to $PASSPORT_FORGE_DATA, then ./data"),
    key("synthetic_train", "5000", "training images in the generated set"),
    key("synthetic_test", "1000", "test images in the generated set"),
    key("synthetic_noise", "1.2", "pixel noise of the generated set"),
    key("synthetic_seed", "0", "seed of the generated set"),
    key("owner_split", "1.0", "share of the training split the owner trains on; below 1 the rest is a disjoint attacker pool"),
    key("split_seed", "0", "seed of the owner/attacker split"),
    key("arch", "alexnet", "alexnet or resnet"),
    key("width", "16", "base channel width"),
    key("sites", "first-2", "passport sites: none, first-k, last-k or a comma list"),
    key("epochs", "15", "owner training epochs"),
    key("batch_size", "64", "owner batch size"),
    key("lr", "0.05", "owner learning rate"),
    key("momentum", "0.9", "owner SGD momentum"),
    key("weight_decay", "0.0005", "owner weight decay"),
    key("alpha", "0.1", "sign-loss weight"),
    key("margin", "0.1", "sign-loss hinge margin"),
    key("verify_min_acc", "0.5", "accuracy a verification must reach besides the sign match"),
    key("block", "cerb", "attack block: cerb, ierb or plain"),
    key("activation", "leaky_relu", "block activation: leaky_relu, tanh or sigmoid"),
    key("depth", "2", "linear layers per block"),
    key("block_sites", "all", "sites that get a block: all or first-k; the rest are attacked directly"),
    key("fraction", "0.1", "attacker share of the attack pool"),
    key("stratified", "true", "draw the attacker share per class"),
    key("attack_epochs", "40", "attack epochs"),
    key("attack_batch_size", "64", "attack batch size"),
    key("attack_optimizer", "sgd", "attack optimizer: sgd or adam"),
    key("attack_lr", "0.05", "attack learning rate"),
    key("attack_momentum", "0.9", "attack SGD momentum"),
    key("attack_warmup_epochs", "0", "epochs of linear learning-rate warmup at the start of an attack"),
    key("attack_eval_every", "1", "evaluate the attack on the test set every n epochs"),
    key("clip_norm", "5", "attack gradient-norm clip; `none` disables it"),
    key("epsilon", "0.05", "accuracy band of a successful forgery"),
    key("delta", "0.2", "bit-dissimilarity floor of a successful forgery"),
    key("seeds", "0", "comma-separated seeds, one run each"),
    key("sweep_site", "0", "passport site whose signs are flipped"),
    key("flips", "0,4,8,12,16", "flip counts of the sign sweep"),
    key("sweep_epochs", "3", "retraining epochs per flip count"),
    key("sweep_lr", "0.01", "retraining learning rate"),
    key("sweep_full", "true", "retrain every weight, not only the flipped site's affine"),
    key("wm_layer", "2", "conv layer holding the weight watermark"),
    key("wm_bits", "64", "watermark length"),
    key("wm_lambda", "1.0", "watermark-loss weight when embedding"),
    key("wm_attack_epochs", "10", "watermark forgery epochs"),
    key("wm_attack_lr", "0.01", "watermark forgery learning rate"),
    key("wm_attack_lambda", "1.0", "watermark-loss weight when forging"),
    key("checkpoint", "", "input checkpoint"),
    key("passport", "", "input passport file"),
    key("key", "", "input watermark key file"),
    key("out", "runs", "root of the run directories"),
];

fn lookup(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

/// Flat `key = value` configuration over [`KEYS`], starting from defaults.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExperimentConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig { values: KEYS.iter().map(|k| (k.name, k.default.to_string())).collect() }
    }
}

impl ExperimentConfig {
    /// Parse `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            cfg.set_raw(k.trim(), v.trim()).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn set_raw(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let k = lookup(key).ok_or_else(|| format!("unknown key `{key}`"))?;
        self.values.insert(k.name, value.to_string());
        Ok(())
    }

    /// Set one key and re-check the whole configuration.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_raw(key, value).map_err(Error::Config)?;
        self.validate()
    }

    /// Builder-style [`set`](Self::set).
    pub fn with(mut self, key: &str, value: impl Display) -> Result<Self> {
        self.set(key, &value.to_string())?;
        Ok(self)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("`{key}` is not a configuration key"))
    }

    /// The resolved configuration, one `key = value` line per key.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{} = {}\n", k.name, self.values[k.name])).collect()
    }

    /// First 16 hex digits of the SHA-256 of [`to_text`](Self::to_text).
    pub fn hash(&self) -> String {
        hex::encode(&Sha256::digest(self.to_text().as_bytes())[..8])
    }

    fn typed<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.get(key).parse().map_err(|e| Error::Config(format!("`{key} = {}`: {e}", self.get(key))))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        let items = self
            .get(key)
            .split(',')
            .map(|s| s.trim().parse().map_err(|e| Error::Config(format!("`{key}` item `{s}`: {e}"))))
            .collect::<Result<Vec<T>>>()?;
        if items.is_empty() {
            return Err(Error::Config(format!("`{key}` is empty")));
        }
        Ok(items)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset()?;
        self.synthetic_spec()?;
        self.arch()?;
        self.sites()?;
        self.embed_hyper()?;
        self.attack_config(0)?;
        self.sweep_config(0)?;
        self.flips()?;
        self.wm_attack_config(0)?;
        self.typed::<usize>("wm_layer")?;
        self.typed::<usize>("wm_bits")?;
        self.typed::<f32>("wm_lambda")?;
        self.typed::<f32>("verify_min_acc")?;
        self.typed::<u64>("split_seed")?;
        let frac = self.fraction()?;
        if !(frac > 0.0 && frac <= 1.0) {
            return Err(Error::Config(format!("fraction {frac} outside (0, 1]")));
        }
        let owner = self.owner_split()?;
        if !(owner > 0.0 && owner <= 1.0) {
            return Err(Error::Config(format!("owner_split {owner} outside (0, 1]")));
        }
        self.seeds()?;
        Ok(())
    }

    pub fn seeds(&self) -> Result<Vec<u64>> {
        self.list("seeds")
    }

    /// This configuration narrowed to a single seed.
    pub fn for_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.values.insert("seeds", seed.to_string());
        c
    }

    pub fn dataset(&self) -> Result<DatasetKind> {
        self.typed("dataset")
    }

    pub fn data_dir(&self) -> PathBuf {
        match self.get("data_dir") {
            "" => std::env::var_os(DATA_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data")),
            d => PathBuf::from(d),
        }
    }

    pub fn synthetic_spec(&self) -> Result<SyntheticSpec> {
        Ok(SyntheticSpec {
            train: self.typed("synthetic_train")?,
            test: self.typed("synthetic_test")?,
            noise: self.typed("synthetic_noise")?,
            seed: self.typed("synthetic_seed")?,
            ..SyntheticSpec::default()
        })
    }

    pub fn owner_split(&self) -> Result<f64> {
        self.typed("owner_split")
    }

    pub fn fraction(&self) -> Result<f64> {
        self.typed("fraction")
    }

    pub fn arch(&self) -> Result<Arch> {
        self.typed("arch")
    }

    pub fn sites(&self) -> Result<SiteSelect> {
        self.typed("sites")
    }

    pub fn train_loop(&self) -> Result<LoopConfig> {
        Ok(LoopConfig {
            epochs: self.typed("epochs")?,
            batch_size: self.typed("batch_size")?,
            lr: self.typed("lr")?,
            momentum: self.typed("momentum")?,
            weight_decay: self.typed("weight_decay")?,
            cosine: true,
            clip_norm: None,
            warmup_epochs: 0,
            optimizer: Optimizer::Sgd,
        })
    }

    pub fn embed_hyper(&self) -> Result<EmbedHyper> {
        Ok(EmbedHyper { alpha: self.typed("alpha")?, margin: self.typed("margin")?, optim: self.train_loop()? })
    }

    fn clip(&self) -> Result<Option<f32>> {
        match self.get("clip_norm") {
            "none" => Ok(None),
            _ => self.typed("clip_norm").map(Some),
        }
    }

    pub fn attack_config(&self, seed: u64) -> Result<AttackConfig> {
        let depth: usize = self.typed("depth")?;
        if depth < 2 {
            return Err(Error::Config(format!("depth {depth} is below 2")));
        }
        Ok(AttackConfig {
            kind: self.typed::<AttackKind>("block")?,
            activation: self.typed::<Activation>("activation")?,
            depth,
            block_sites: self.typed::<BlockSites>("block_sites")?,
            optim: LoopConfig {
                epochs: self.typed("attack_epochs")?,
                batch_size: self.typed("attack_batch_size")?,
                lr: self.typed("attack_lr")?,
                momentum: self.typed("attack_momentum")?,
                weight_decay: 0.0,
                cosine: true,
                clip_norm: self.clip()?,
                warmup_epochs: self.typed("attack_warmup_epochs")?,
                optimizer: self.typed("attack_optimizer")?,
            },
            seed,
            epsilon: self.typed("epsilon")?,
            delta: self.typed("delta")?,
            eval_every: self.typed("attack_eval_every")?,
        })
    }

    pub fn sweep_config(&self, seed: u64) -> Result<SweepConfig> {
        Ok(SweepConfig {
            site: self.typed("sweep_site")?,
            optim: LoopConfig {
                epochs: self.typed("sweep_epochs")?,
                lr: self.typed("sweep_lr")?,
                weight_decay: 0.0,
                clip_norm: self.clip()?,
                ..LoopConfig::default()
            },
            full_finetune: self.typed("sweep_full")?,
            seed,
        })
    }

    pub fn flips(&self) -> Result<Vec<usize>> {
        self.list("flips")
    }

    pub fn wm_attack_config(&self, seed: u64) -> Result<WmAttackConfig> {
        Ok(WmAttackConfig {
            lambda: self.typed("wm_attack_lambda")?,
            activation: self.typed::<Activation>("activation")?,
            depth: self.typed("depth")?,
            optim: LoopConfig {
                epochs: self.typed("wm_attack_epochs")?,
                lr: self.typed("wm_attack_lr")?,
                weight_decay: 0.0,
                clip_norm: self.clip()?,
                ..LoopConfig::default()
            },
            seed,
        })
    }

    fn input(&self, key: &str) -> Result<PathBuf> {
        match self.get(key) {
            "" => Err(Error::Config(format!("`{key}` must name an input file"))),
            p => Ok(PathBuf::from(p)),
        }
    }

    fn optional_input(&self, key: &str) -> Option<PathBuf> {
        Some(self.get(key)).filter(|p| !p.is_empty()).map(PathBuf::from)
    }

    /// Short human-readable part of the run directory name.
    fn label(&self, command: &str) -> String {
        let model = format!("{}{}", self.get("arch"), self.get("width"));
        match command {
            "attack" => format!("{}-f{}", self.get("block"), self.get("fraction")),
            "train-protected" => format!("{model}-{}", self.get("sites")),
            "sweep-signs" => format!("site{}", self.get("sweep_site")),
            "wm-embed" | "wm-attack" => format!("{model}-l{}", self.get("wm_layer")),
            _ => model,
        }
    }
}

fn read_input(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Owner training split, test split, and the pool attack data is drawn from.
pub struct ExperimentData {
    pub train: Dataset,
    pub test: Dataset,
    attacker: Option<Dataset>,
}

impl ExperimentData {
    /// The attacker's pool: a disjoint share when the owner split is below
    /// one, the owner's own training split otherwise.
    pub fn pool(&self) -> &Dataset {
        self.attacker.as_ref().unwrap_or(&self.train)
    }
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let (train, test) = match cfg.dataset()? {
        DatasetKind::Synthetic => synthetic(&cfg.synthetic_spec()?)?,
        kind => load_dataset(kind, &cfg.data_dir())?,
    };
    let share = cfg.owner_split()?;
    if share >= 1.0 {
        return Ok(ExperimentData { train, test, attacker: None });
    }
    let n = train.len();
    let owner = (share * n as f64).round() as usize;
    let (owned, attacker) = disjoint_split(&train, owner, n - owner, cfg.typed("split_seed")?)?;
    Ok(ExperimentData { train: owned, test, attacker: Some(attacker) })
}

/// Model spec from the configuration; `protected` keeps the passport sites.
pub fn model_spec(cfg: &ExperimentConfig, data: &Dataset, protected: bool) -> Result<ModelSpec> {
    let sites = if protected { cfg.sites()? } else { SiteSelect::None };
    ModelSpec::new(cfg.arch()?, data.dims, data.num_classes, cfg.typed("width")?, &sites)
}

/// Fresh passports and signatures for every passport site of `spec`.
pub fn generate_passports(spec: &ModelSpec, seed: u64) -> (PassportSet, SignatureSet) {
    let geoms = spec.sites();
    let mut passports = PassportSet::new();
    let mut signatures = SignatureSet::new();
    for &i in &spec.passport_sites {
        passports.insert(i, random_passport(&geoms[i], seed, i));
        signatures.insert(i, Signature::random(geoms[i].cout, seed, i));
    }
    (passports, signatures)
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run: String,
    pub seed: u64,
    pub epoch: usize,
    pub acc: f32,
    /// Mean over passport sites; empty when not measured.
    pub bdr: Option<f32>,
    pub config_hash: String,
}

/// One row of `sweep.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub run: String,
    pub seed: u64,
    pub flips: usize,
    pub acc: f32,
    pub coincidence: f32,
    pub config_hash: String,
}

#[derive(Clone, Debug)]
pub struct RunDir {
    pub path: PathBuf,
    /// Name of the run family, shared across seeds.
    pub name: String,
    pub seed: u64,
    pub config_hash: String,
}

impl RunDir {
    /// Create `<out>/<command>-<label>-<group>/seed-<seed>` and write the
    /// resolved configuration into it.
    pub fn create(cfg: &ExperimentConfig, command: &str, seed: u64) -> Result<Self> {
        let mut family = cfg.clone();
        family.values.insert("seeds", "*".into());
        let name = format!("{command}-{}-{}", cfg.label(command), &family.hash()[..8]);
        let path = PathBuf::from(cfg.get("out")).join(&name).join(format!("seed-{seed}"));
        std::fs::create_dir_all(&path)?;
        let resolved = cfg.for_seed(seed);
        std::fs::write(path.join("config.txt"), resolved.to_text())?;
        Ok(RunDir { path, name, seed, config_hash: resolved.hash() })
    }

    pub fn write(&self, file: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path.join(file);
        std::fs::write(&p, bytes)?;
        Ok(p)
    }

    /// `history.csv`: epoch, train_loss, test_acc, then one BDR column per site.
    pub fn write_history(&self, history: &[EpochRecord], sites: &[usize]) -> Result<()> {
        let mut w = csv::Writer::from_path(self.path.join("history.csv"))?;
        let mut header = vec!["epoch".to_string(), "train_loss".into(), "test_acc".into()];
        header.extend(sites.iter().map(|s| format!("bdr_site{s}")));
        w.write_record(&header)?;
        for r in history {
            let mut row = vec![r.epoch.to_string(), r.train_loss.to_string(), r.test_acc.to_string()];
            row.extend(r.bdr.iter().map(|b| b.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_metrics(&self, history: &[EpochRecord]) -> Result<()> {
        let rows: Vec<MetricsRow> = history
            .iter()
            .map(|r| MetricsRow {
                run: self.name.clone(),
                seed: self.seed,
                epoch: r.epoch,
                acc: r.test_acc,
                bdr: mean(&r.bdr),
                config_hash: self.config_hash.clone(),
            })
            .collect();
        write_rows(&self.path.join("metrics.csv"), &rows)
    }
}

fn mean(v: &[f32]) -> Option<f32> {
    (!v.is_empty()).then(|| (v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64) as f32)
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Final numbers of one seed's run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub seed: u64,
    pub acc: f32,
    pub bdr: Option<f32>,
}

fn summarize(dir: &RunDir, history: &[EpochRecord]) -> RunSummary {
    let last = history.last();
    RunSummary {
        dir: dir.path.clone(),
        seed: dir.seed,
        acc: last.map_or(f32::NAN, |r| r.test_acc),
        bdr: last.and_then(|r| mean(&r.bdr)),
    }
}

pub fn run_train_baseline(cfg: &ExperimentConfig) -> Result<Vec<RunSummary>> {
    let data = load_data(cfg)?;
    let spec = model_spec(cfg, &data.train, false)?;
    let optim = cfg.train_loop()?;
    let mut out = Vec::new();
    for seed in cfg.seeds()? {
        let dir = RunDir::create(cfg, "train-baseline", seed)?;
        let (model, history) = train::train_baseline(&spec, &data.train, &data.test, &optim, seed)?;
        dir.write_history(&history, &[])?;
        dir.write_metrics(&history)?;
        dir.write("checkpoint.bin", &model.save_checkpoint(seed, optim.epochs))?;
        out.push(summarize(&dir, &history));
    }
    Ok(out)
}

/// Writes `checkpoint.bin` (passport-free) and `passport.bin` per seed.
pub fn run_train_protected(cfg: &ExperimentConfig) -> Result<Vec<RunSummary>> {
    let data = load_data(cfg)?;
    let spec = model_spec(cfg, &data.train, true)?;
    if spec.passport_sites.is_empty() {
        return Err(Error::Config("`sites` selects no passport site".into()));
    }
    let hyper = cfg.embed_hyper()?;
    let mut out = Vec::new();
    for seed in cfg.seeds()? {
        let dir = RunDir::create(cfg, "train-protected", seed)?;
        let (passports, signatures) = generate_passports(&spec, seed);
        let (model, history) = train::train_protected(&spec, &passports, &signatures, &data.train, &data.test, &hyper, seed)?;
        dir.write_history(&history, &spec.passport_sites)?;
        dir.write_metrics(&history)?;
        dir.write("checkpoint.bin", &model.save_checkpoint(seed, hyper.optim.epochs))?;
        dir.write("passport.bin", &save_passports(&passports, &signatures, &spec.spec_hash()))?;
        out.push(summarize(&dir, &history));
    }
    Ok(out)
}

fn read_passport_file(path: &Path, spec: &ModelSpec) -> Result<(PassportSet, SignatureSet)> {
    let (p, s, hash) = load_passports(&read_input(path)?)?;
    if hash != spec.spec_hash() {
        return Err(Error::SpecMismatch { expected: spec.spec_hash(), found: hash });
    }
    Ok((p, s))
}

/// Attack `checkpoint` once per seed. The owner's `passport` file, when
/// set, is read only for its signatures, to report bit dissimilarity.
pub fn run_attack(cfg: &ExperimentConfig) -> Result<Vec<RunSummary>> {
    let data = load_data(cfg)?;
    let spec = model_spec(cfg, &data.train, true)?;
    let checkpoint = read_input(&cfg.input("checkpoint")?)?;
    let reference = match cfg.optional_input("passport") {
        Some(p) => Some(read_passport_file(&p, &spec)?.1),
        None => None,
    };
    let fraction = cfg.fraction()?;
    let stratified: bool = cfg.typed("stratified")?;
    let mut out = Vec::new();
    for seed in cfg.seeds()? {
        let dir = RunDir::create(cfg, "attack", seed)?;
        let attack_data = subset(data.pool(), fraction, seed, stratified)?;
        let acfg = cfg.attack_config(seed)?;
        let outcome = attack::run_attack(&checkpoint, &spec, &attack_data, &data.test, &acfg, reference.as_ref())?;
        dir.write_history(&outcome.history, if reference.is_some() { &spec.passport_sites } else { &[] })?;
        dir.write_metrics(&outcome.history)?;
        dir.write("checkpoint.bin", &outcome.model.save_checkpoint(seed, outcome.epochs_trained))?;
        out.push(summarize(&dir, &outcome.history));
    }
    Ok(out)
}

pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<(RunDir, Vec<SweepPoint>)>> {
    let data = load_data(cfg)?;
    let spec = model_spec(cfg, &data.train, true)?;
    let (mut model, _) = Model::load_checkpoint(&read_input(&cfg.input("checkpoint")?)?, &spec)?;
    let (passports, _) = read_passport_file(&cfg.input("passport")?, &spec)?;
    let flips = cfg.flips()?;
    let mut out = Vec::new();
    for seed in cfg.seeds()? {
        let dir = RunDir::create(cfg, "sweep-signs", seed)?;
        let points = attack::sign_flip_sweep(&mut model, &passports, &data.train, &data.test, &flips, &cfg.sweep_config(seed)?)?;
        let rows: Vec<SweepRow> = points
            .iter()
            .map(|p| SweepRow {
                run: dir.name.clone(),
                seed,
                flips: p.flips,
                acc: p.acc,
                coincidence: p.coincidence,
                config_hash: dir.config_hash.clone(),
            })
            .collect();
        write_rows(&dir.path.join("sweep.csv"), &rows)?;
        out.push((dir, points));
    }
    Ok(out)
}

/// Writes `checkpoint.bin` and `key.bin`; the BDR column is the bit error
/// rate of the extracted watermark.
pub fn run_wm_embed(cfg: &ExperimentConfig) -> Result<Vec<RunSummary>> {
    let data = load_data(cfg)?;
    let spec = model_spec(cfg, &data.train, false)?;
    let optim = cfg.train_loop()?;
    let lambda: f32 = cfg.typed("wm_lambda")?;
    let mut out = Vec::new();
    for seed in cfg.seeds()? {
        let dir = RunDir::create(cfg, "wm-embed", seed)?;
        let key = WatermarkKey::generate(&spec, cfg.typed("wm_layer")?, cfg.typed("wm_bits")?, seed)?;
        let (model, history) = watermark::uchida_embed(&spec, &data.train, &data.test, &key, lambda, &optim, seed)?;
        dir.write_history(&history, &[key.layer])?;
        dir.write_metrics(&history)?;
        dir.write("checkpoint.bin", &model.save_checkpoint(seed, optim.epochs))?;
        dir.write("key.bin", &key.to_bytes())?;
        out.push(summarize(&dir, &history));
    }
    Ok(out)
}

/// Bits to forge: uniform random, redrawn until they differ from `owner`.
pub fn forged_bits(owner: &[u8], seed: u64) -> Vec<u8> {
    use rand::Rng;
    let mut rng = substream(seed, "wm/forge");
    loop {
        let bits: Vec<u8> = (0..owner.len()).map(|_| rng.gen_range(0..2u8)).collect();
        if bits != owner {
            return bits;
        }
    }
}

pub fn run_wm_attack(cfg: &ExperimentConfig) -> Result<Vec<(RunDir, WmAttackReport)>> {
    let data = load_data(cfg)?;
    let spec = model_spec(cfg, &data.train, false)?;
    let checkpoint = read_input(&cfg.input("checkpoint")?)?;
    let key = WatermarkKey::from_bytes(&read_input(&cfg.input("key")?)?)?;
    let fraction = cfg.fraction()?;
    let stratified: bool = cfg.typed("stratified")?;
    let mut out = Vec::new();
    for seed in cfg.seeds()? {
        let dir = RunDir::create(cfg, "wm-attack", seed)?;
        let attack_data = subset(data.pool(), fraction, seed, stratified)?;
        let bits = forged_bits(&key.bits, seed);
        let wcfg = cfg.wm_attack_config(seed)?;
        let (model, report) = watermark::cerb_attack_watermark(&checkpoint, &spec, &attack_data, &data.test, &key, &bits, &wcfg)?;
        let row = MetricsRow {
            run: dir.name.clone(),
            seed,
            epoch: wcfg.optim.epochs,
            acc: report.acc,
            bdr: Some(report.bdr_original),
            config_hash: dir.config_hash.clone(),
        };
        write_rows(&dir.path.join("metrics.csv"), &[row])?;
        dir.write("report.json", serde_json::to_string_pretty(&report)?.as_bytes())?;
        dir.write("checkpoint.bin", &model.save_checkpoint(seed, wcfg.optim.epochs))?;
        out.push((dir, report));
    }
    Ok(out)
}

/// Ownership check of `checkpoint` against `passport`.
pub fn verify_files(cfg: &ExperimentConfig) -> Result<Verification> {
    let data = load_data(cfg)?;
    let spec = model_spec(cfg, &data.train, true)?;
    let (mut model, _) = Model::load_checkpoint(&read_input(&cfg.input("checkpoint")?)?, &spec)?;
    let (passports, signatures) = read_passport_file(&cfg.input("passport")?, &spec)?;
    train::verify(&mut model, &passports, &signatures, &data.test, cfg.typed("verify_min_acc")?)
}

/// Test accuracy of `checkpoint`, with `passport` when one is given. A
/// checkpoint without passport sites is read with `sites = none`.
pub fn eval_file(cfg: &ExperimentConfig) -> Result<f32> {
    let data = load_data(cfg)?;
    let bytes = read_input(&cfg.input("checkpoint")?)?;
    let passports = match cfg.optional_input("passport") {
        Some(p) => Some(read_passport_file(&p, &model_spec(cfg, &data.train, true)?)?.0),
        None => None,
    };
    let protected = model_spec(cfg, &data.train, true)?;
    let mut model = match Model::load_checkpoint(&bytes, &protected) {
        Ok((m, _)) => m,
        Err(Error::SpecMismatch { .. }) if passports.is_none() => Model::load_checkpoint(&bytes, &model_spec(cfg, &data.train, false)?)?.0,
        Err(e) => return Err(e),
    };
    train::evaluate(&mut model, &data.test, passports.as_ref())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Table {
    /// Final metrics row of every run.
    Runs,
    /// Attack ACC and BDR per block kind and fraction.
    Table1,
    /// Attack ACC by fraction (rows) and block kind (columns).
    Table2,
    /// Attack ACC per block-site count, depth and activation.
    Ablation,
}

impl FromStr for Table {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "runs" => Ok(Table::Runs),
            "table1" => Ok(Table::Table1),
            "table2" => Ok(Table::Table2),
            "ablation" => Ok(Table::Ablation),
            _ => Err(Error::Config(format!("unknown table `{s}` (runs, table1, table2, ablation)"))),
        }
    }
}

/// A finished run as read back from disk.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub family: String,
    pub config: ExperimentConfig,
    pub last: MetricsRow,
}

/// Every `<family>/seed-*/` under `root` holding a config and metrics file,
/// sorted by family and seed.
pub fn collect_runs(root: &Path) -> Result<Vec<RunRecord>> {
    let mut runs = Vec::new();
    for family in sorted_dirs(root)? {
        let family_name = family.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        for run in sorted_dirs(&family)? {
            let (cfg_path, metrics_path) = (run.join("config.txt"), run.join("metrics.csv"));
            if !cfg_path.is_file() || !metrics_path.is_file() {
                continue;
            }
            let config = ExperimentConfig::load(&cfg_path)?;
            let mut reader = csv::Reader::from_path(&metrics_path)?;
            let rows = reader.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>()?;
            let last = rows.into_iter().last().ok_or_else(|| Error::Config(format!("{} is empty", metrics_path.display())))?;
            runs.push(RunRecord { family: family_name.clone(), config, last });
        }
    }
    runs.sort_by(|a, b| (&a.family, a.last.seed).cmp(&(&b.family, b.last.seed)));
    Ok(runs)
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> =
        std::fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    out.sort();
    Ok(out)
}

#[derive(Default)]
struct Agg {
    acc: Vec<f64>,
    bdr: Vec<f64>,
}

impl Agg {
    fn push(&mut self, row: &MetricsRow) {
        self.acc.push(row.acc as f64);
        if let Some(b) = row.bdr {
            self.bdr.push(b as f64);
        }
    }
}

fn fmt_mean(v: &[f64]) -> String {
    if v.is_empty() {
        String::new()
    } else {
        format!("{:.4}", v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Aggregate the runs under `root` into one CSV table.
pub fn report(root: &Path, table: Table) -> Result<String> {
    let runs = collect_runs(root)?;
    let attacks = || runs.iter().filter(|r| r.family.starts_with("attack-"));
    let mut w = csv::Writer::from_writer(Vec::new());
    match table {
        Table::Runs => {
            for r in &runs {
                w.serialize(&r.last)?;
            }
        }
        Table::Table1 => {
            let mut groups: BTreeMap<(String, String), Agg> = BTreeMap::new();
            for r in attacks() {
                let k = (r.config.get("block").to_string(), r.config.get("fraction").to_string());
                groups.entry(k).or_default().push(&r.last);
            }
            w.write_record(["block", "fraction", "seeds", "acc", "bdr"])?;
            for ((block, fraction), a) in &groups {
                w.write_record([block, fraction, &a.acc.len().to_string(), &fmt_mean(&a.acc), &fmt_mean(&a.bdr)])?;
            }
        }
        Table::Table2 => {
            let mut groups: BTreeMap<(OrdF64, String), Agg> = BTreeMap::new();
            for r in attacks() {
                let k = (OrdF64(r.config.fraction()?), r.config.get("block").to_string());
                groups.entry(k).or_default().push(&r.last);
            }
            let mut fractions: Vec<OrdF64> = groups.keys().map(|k| k.0).collect();
            fractions.dedup();
            w.write_record(["fraction", "plain", "cerb", "ierb"])?;
            for f in fractions {
                let cell = |b: &str| groups.get(&(f, b.to_string())).map_or(String::new(), |a| fmt_mean(&a.acc));
                w.write_record([f.0.to_string(), cell("plain"), cell("cerb"), cell("ierb")])?;
            }
        }
        Table::Ablation => {
            let mut groups: BTreeMap<[String; 5], Agg> = BTreeMap::new();
            for r in attacks() {
                let c = &r.config;
                let k = ["block", "block_sites", "depth", "activation", "fraction"].map(|key| c.get(key).to_string());
                groups.entry(k).or_default().push(&r.last);
            }
            w.write_record(["block", "block_sites", "depth", "activation", "fraction", "seeds", "acc"])?;
            for (k, a) in &groups {
                let mut row = k.to_vec();
                row.push(a.acc.len().to_string());
                row.push(fmt_mean(&a.acc));
                w.write_record(&row)?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Config(e.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}
