//! Image classification datasets: MNIST IDX and CIFAR-10 binary readers, a
//! procedural stand-in for offline runs, and the attacker's sampling plans.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use forge_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Attack,
}

/// Per-channel constants used to standardize pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[C, H, W]` of one image.
    pub dims: [usize; 3],
    pub num_classes: usize,
    /// Row-major `[N, C, H, W]`.
    pub pixels: Vec<f32>,
    pub labels: Vec<usize>,
    pub split: Split,
    /// Split the samples were drawn from and their indices in it.
    pub source: Split,
    pub origin: Vec<usize>,
    pub norm: Option<Normalization>,
}

impl Dataset {
    pub fn new(dims: [usize; 3], num_classes: usize, pixels: Vec<f32>, labels: Vec<usize>, split: Split) -> Result<Self> {
        let per = dims.iter().product::<usize>();
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(Error::Data(format!(
                "{} pixels do not fit {} images of {dims:?}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {l} outside {num_classes} classes")));
        }
        let origin = (0..labels.len()).collect();
        Ok(Dataset { dims, num_classes, pixels, labels, split, source: split, origin, norm: None })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Stack the given samples into an `[n, C, H, W]` tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.dims;
        let t = Tensor::new(vec![indices.len(), c, h, w], data).expect("batch of at least one sample");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Samples at `indices`, keeping their provenance.
    pub fn select(&self, indices: &[usize], split: Split) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Dataset {
            dims: self.dims,
            num_classes: self.num_classes,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split,
            source: self.source,
            origin: indices.iter().map(|&i| self.origin[i]).collect(),
            norm: self.norm.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Per-channel mean and standard deviation over every pixel.
    pub fn channel_stats(&self) -> Normalization {
        let [c, h, w] = self.dims;
        let hw = h * w;
        let mut mean = Vec::with_capacity(c);
        let mut std = Vec::with_capacity(c);
        for ch in 0..c {
            let (mut s, mut s2, mut n) = (0.0f64, 0.0f64, 0usize);
            for i in 0..self.len() {
                for &v in &self.image(i)[ch * hw..(ch + 1) * hw] {
                    s += v as f64;
                    s2 += (v as f64) * (v as f64);
                    n += 1;
                }
            }
            let m = s / n.max(1) as f64;
            let var = (s2 / n.max(1) as f64 - m * m).max(0.0);
            mean.push(m as f32);
            std.push((var.sqrt() as f32).max(1e-6));
        }
        Normalization { mean, std }
    }

    /// Standardize in place; records the constants.
    pub fn normalize(&mut self, norm: &Normalization) -> Result<()> {
        let [c, h, w] = self.dims;
        if norm.mean.len() != c || norm.std.len() != c {
            return Err(Error::Data(format!("normalization for {} channels applied to {c}", norm.mean.len())));
        }
        for img in self.pixels.chunks_exact_mut(c * h * w) {
            for (ch, plane) in img.chunks_exact_mut(h * w).enumerate() {
                for v in plane {
                    *v = (*v - norm.mean[ch]) / norm.std[ch];
                }
            }
        }
        self.norm = Some(norm.clone());
        Ok(())
    }
}

/// Standardize both splits with constants measured on the training split.
pub fn normalize_pair(train: &mut Dataset, test: &mut Dataset) -> Result<()> {
    let norm = train.channel_stats();
    train.normalize(&norm)?;
    test.normalize(&norm)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    Synthetic,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" => Ok(DatasetKind::Cifar10),
            "synthetic" => Ok(DatasetKind::Synthetic),
            _ => Err(Error::Config(format!("unknown dataset `{s}` (mnist, cifar10, synthetic)"))),
        }
    }
}

/// Read a standard dataset from `dir`; both splits come back standardized
/// with the training split's per-channel constants.
pub fn load_dataset(kind: DatasetKind, dir: &Path) -> Result<(Dataset, Dataset)> {
    let (mut train, mut test) = match kind {
        DatasetKind::Mnist => (
            read_mnist(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"), Split::Train)?,
            read_mnist(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"), Split::Test)?,
        ),
        DatasetKind::Cifar10 => {
            let base = if dir.join("cifar-10-batches-bin").is_dir() { dir.join("cifar-10-batches-bin") } else { dir.to_path_buf() };
            let train_files: Vec<PathBuf> = (1..=5).map(|i| base.join(format!("data_batch_{i}.bin"))).collect();
            (read_cifar10(&train_files, Split::Train)?, read_cifar10(&[base.join("test_batch.bin")], Split::Test)?)
        }
        DatasetKind::Synthetic => {
            return Err(Error::Data("the synthetic set is generated, not loaded; use `synthetic`".into()))
        }
    };
    normalize_pair(&mut train, &mut test)?;
    Ok((train, test))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(b[at..at + 4].try_into().unwrap())
}

/// Decode an IDX image file and its label file. Pixels are scaled to `[0, 1]`.
pub fn read_mnist(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    decode_mnist(&read(images)?, &read(labels)?, split)
}

pub fn decode_mnist(img: &[u8], lbl: &[u8], split: Split) -> Result<Dataset> {
    if img.len() < 16 || be_u32(img, 0) != 0x0000_0803 {
        return Err(Error::Data("MNIST images: bad magic (want 0x00000803)".into()));
    }
    if lbl.len() < 8 || be_u32(lbl, 0) != 0x0000_0801 {
        return Err(Error::Data("MNIST labels: bad magic (want 0x00000801)".into()));
    }
    let (n, rows, cols) = (be_u32(img, 4) as usize, be_u32(img, 8) as usize, be_u32(img, 12) as usize);
    let per = rows * cols;
    if img.len() != 16 + n * per {
        return Err(Error::Data(format!("MNIST images: {} bytes for {n} images of {rows}x{cols}", img.len())));
    }
    let nl = be_u32(lbl, 4) as usize;
    if nl != n || lbl.len() != 8 + n {
        return Err(Error::Data(format!("MNIST labels: header says {nl}, file holds {}, images {n}", lbl.len() - 8)));
    }
    let pixels = img[16..].iter().map(|&b| b as f32 / 255.0).collect();
    let labels = lbl[8..].iter().map(|&b| b as usize).collect();
    Dataset::new([1, rows, cols], 10, pixels, labels, split)
}

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Decode CIFAR-10 binary batches: each record is a label byte followed by
/// the R, G and B planes of a 32x32 image.
pub fn read_cifar10(files: &[PathBuf], split: Split) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for f in files {
        let b = read(f)?;
        if b.len() % CIFAR_RECORD != 0 {
            return Err(Error::Data(format!("{}: {} bytes is not a whole number of records", f.display(), b.len())));
        }
        bytes.extend(b);
    }
    decode_cifar10(&bytes, split)
}

pub fn decode_cifar10(bytes: &[u8], split: Split) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Data(format!("CIFAR-10: {} bytes is not a whole number of records", bytes.len())));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new([3, 32, 32], 10, pixels, labels, split)
}

/// Parameters of the procedural dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub channels: usize,
    pub size: usize,
    pub classes: usize,
    pub train: usize,
    pub test: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { channels: 3, size: 16, classes: 10, train: 5000, test: 1000, noise: 1.2, seed: 0 }
    }
}

struct ClassProto {
    angle: f32,
    freq: f32,
    tint: Vec<f32>,
    blob: (f32, f32),
}

/// Class-conditional oriented gratings with a per-class colour tint and a
/// soft blob, under random phase, contrast, jitter, distractor and noise.
/// Both splits are standardized with the training constants.
pub fn synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    if spec.channels == 0 || spec.size < 4 || spec.classes < 2 || spec.train == 0 || spec.test == 0 {
        return Err(Error::Data(format!("degenerate synthetic spec {spec:?}")));
    }
    let mut prng = substream(spec.seed, "synthetic/classes");
    let angles = spec.classes.div_ceil(2);
    let protos: Vec<ClassProto> = (0..spec.classes)
        .map(|k| ClassProto {
            angle: std::f32::consts::PI * (k % angles) as f32 / angles as f32,
            freq: if k < angles { 1.5 } else { 3.0 },
            tint: (0..spec.channels).map(|_| prng.gen_range(-1.0f32..1.0)).collect(),
            blob: (prng.gen_range(0.2..0.8), prng.gen_range(0.2..0.8)),
        })
        .collect();
    let make = |count: usize, split: Split, stream: &str| -> Result<Dataset> {
        let mut rng = substream(spec.seed, stream);
        let noise = Normal::new(0.0f32, spec.noise).map_err(|e| Error::Data(e.to_string()))?;
        let (c, s) = (spec.channels, spec.size);
        let mut pixels = Vec::with_capacity(count * c * s * s);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let k = i % spec.classes;
            let p = &protos[k];
            let angle = p.angle + rng.gen_range(-0.25f32..0.25);
            let freq = p.freq * rng.gen_range(0.85f32..1.15);
            let phase = rng.gen_range(0.0f32..std::f32::consts::TAU);
            let contrast = rng.gen_range(0.5f32..1.5);
            let (bx, by) = (p.blob.0 + rng.gen_range(-0.15f32..0.15), p.blob.1 + rng.gen_range(-0.15f32..0.15));
            let d_angle = rng.gen_range(0.0f32..std::f32::consts::PI);
            let d_phase = rng.gen_range(0.0f32..std::f32::consts::TAU);
            let d_tint: Vec<f32> = (0..c).map(|_| rng.gen_range(-0.6f32..0.6)).collect();
            let (ca, sa, cd, sd) = (angle.cos(), angle.sin(), d_angle.cos(), d_angle.sin());
            for ch in 0..c {
                for y in 0..s {
                    for x in 0..s {
                        let (u, v) = (x as f32 / s as f32, y as f32 / s as f32);
                        let g = (std::f32::consts::TAU * freq * (u * ca + v * sa) + phase).cos();
                        let d = (std::f32::consts::TAU * 2.0 * (u * cd + v * sd) + d_phase).cos();
                        let r2 = (u - bx).powi(2) + (v - by).powi(2);
                        let blob = (-r2 / 0.02).exp();
                        pixels.push(
                            contrast * p.tint[ch] * (g + blob) + d_tint[ch] * d + noise.sample(&mut rng),
                        );
                    }
                }
            }
            labels.push(k);
        }
        // Interleaved class order is an artifact of generation; shuffle it away.
        let mut order: Vec<usize> = (0..count).collect();
        order.shuffle(&mut rng);
        let raw = Dataset::new([c, s, s], spec.classes, pixels, labels, split)?;
        let mut out = raw.select(&order, split);
        out.origin = (0..count).collect();
        Ok(out)
    };
    let mut train = make(spec.train, Split::Train, "synthetic/train")?;
    let mut test = make(spec.test, Split::Test, "synthetic/test")?;
    normalize_pair(&mut train, &mut test)?;
    Ok((train, test))
}

/// Deterministic sample of `fraction` of the data. Stratified sampling
/// allots per-class quotas by largest remainder, so each class gets its
/// proportional share within one sample.
pub fn subset(data: &Dataset, fraction: f64, seed: u64, stratified: bool) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("subset fraction {fraction} outside (0, 1]")));
    }
    guard_attack_source(data)?;
    let n = data.len();
    let target = (fraction * n as f64).round() as usize;
    if target == 0 {
        return Err(Error::Data(format!("fraction {fraction} of {n} samples is empty")));
    }
    if target == n {
        return Ok(data.select(&(0..n).collect::<Vec<_>>(), Split::Attack));
    }
    let mut rng = substream(seed, "subset");
    let mut picked = if stratified {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in data.labels.iter().enumerate() {
            by_class.entry(l).or_default().push(i);
        }
        let quotas = largest_remainder(&by_class.values().map(Vec::len).collect::<Vec<_>>(), target);
        let mut picked = Vec::with_capacity(target);
        for (members, q) in by_class.values_mut().zip(quotas) {
            members.shuffle(&mut rng);
            picked.extend_from_slice(&members[..q]);
        }
        picked
    } else {
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut rng);
        all.truncate(target);
        all
    };
    picked.sort_unstable();
    Ok(data.select(&picked, Split::Attack))
}

/// Split `total` across groups in proportion to `sizes`.
fn largest_remainder(sizes: &[usize], total: usize) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    let exact: Vec<f64> = sizes.iter().map(|&s| s as f64 * total as f64 / n as f64).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let short = total - quotas.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        quotas[i] += 1;
    }
    quotas
}

/// Two non-intersecting random draws, for owner and attacker.
pub fn disjoint_split(data: &Dataset, owner: usize, attacker: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    guard_attack_source(data)?;
    if owner.checked_add(attacker).map_or(true, |t| t > data.len()) {
        return Err(Error::InvalidArgument(format!(
            "owner {owner} + attacker {attacker} exceeds {} samples",
            data.len()
        )));
    }
    let mut perm: Vec<usize> = (0..data.len()).collect();
    perm.shuffle(&mut substream(seed, "disjoint_split"));
    let mut a = perm[..owner].to_vec();
    let mut b = perm[owner..owner + attacker].to_vec();
    a.sort_unstable();
    b.sort_unstable();
    Ok((data.select(&a, Split::Train), data.select(&b, Split::Attack)))
}

fn guard_attack_source(data: &Dataset) -> Result<()> {
    if data.source == Split::Test {
        return Err(Error::Data("attack and owner data may not be drawn from the test split".into()));
    }
    Ok(())
}

/// Attack data must never share samples with the evaluation set.
pub fn ensure_disjoint_from_test(attack: &Dataset, test: &Dataset) -> Result<()> {
    if attack.source == test.source {
        return Err(Error::Data("attack set was drawn from the test split".into()));
    }
    Ok(())
}
