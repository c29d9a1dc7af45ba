//! Passports, signatures, and the affine factors derived from them.

use std::collections::BTreeMap;

use forge_autodiff::{Tape, Tensor, Var};
use rand::Rng;
use serde_json::json;

use crate::archive::{Archive, PASSPORT_MAGIC};
use crate::error::{Error, Result};
use crate::model::SiteGeom;
use crate::rng::substream;

/// Secret inputs whose convolution with a site's weights yields its scale
/// and bias. Each is shaped like the conv's input feature map `[Cin, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Passport {
    pub s_gamma: Tensor,
    pub s_beta: Tensor,
}

pub type PassportSet = BTreeMap<usize, Passport>;
pub type SignatureSet = BTreeMap<usize, Signature>;

impl Passport {
    pub fn new(s_gamma: Tensor, s_beta: Tensor) -> Result<Self> {
        if s_gamma.rank() != 3 || s_gamma.shape() != s_beta.shape() {
            return Err(Error::InvalidArgument(format!(
                "passport tensors must share a [Cin, H, W] shape, got {:?} and {:?}",
                s_gamma.shape(),
                s_beta.shape()
            )));
        }
        if !s_gamma.is_finite() || !s_beta.is_finite() {
            return Err(Error::InvalidArgument("passport has non-finite entries".into()));
        }
        Ok(Passport { s_gamma, s_beta })
    }

    pub fn shape(&self) -> &[usize] {
        self.s_gamma.shape()
    }
}

/// Target signs for a site's scale factors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Signature(Vec<i8>);

impl Signature {
    pub fn new(bits: Vec<i8>) -> Result<Self> {
        if bits.is_empty() || bits.iter().any(|&b| b != 1 && b != -1) {
            return Err(Error::InvalidArgument("signature bits must be -1 or +1".into()));
        }
        Ok(Signature(bits))
    }

    pub fn random(len: usize, seed: u64, site: usize) -> Self {
        let mut rng = substream(seed, &format!("signature/{site}"));
        Signature((0..len).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect())
    }

    /// Signs of `values`, with `sign(0) = +1`.
    pub fn from_signs(values: &[f32]) -> Self {
        Signature(values.iter().map(|&v| if v >= 0.0 { 1 } else { -1 }).collect())
    }

    pub fn bits(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&b| b as f32).collect()
    }

    /// Fraction of positions where `gamma`'s sign equals the bit.
    pub fn match_rate(&self, gamma: &[f32]) -> Result<f32> {
        if gamma.len() != self.len() {
            return Err(Error::InvalidArgument(format!("{} scale factors vs {}-bit signature", gamma.len(), self.len())));
        }
        let hits = gamma.iter().zip(&self.0).filter(|(g, b)| forge_autodiff::sign(**g) == **b as f32).count();
        Ok((hits as f64 / self.len() as f64) as f32)
    }
}

/// Standard-normal passport for a site, deterministic in `(seed, site)`.
pub fn random_passport(geom: &SiteGeom, seed: u64, site: usize) -> Passport {
    let mut rng = substream(seed, &format!("passport/{site}"));
    let shape = [geom.cin, geom.in_hw.0, geom.in_hw.1];
    let s_gamma = Tensor::randn(&shape, 1.0, &mut rng);
    let s_beta = Tensor::randn(&shape, 1.0, &mut rng);
    Passport { s_gamma, s_beta }
}

/// Scale and bias from a passport, recorded on the tape so gradients reach
/// the conv weight: each is the spatial mean of `conv(s, weight)`.
pub fn derive_affine_on_tape(tape: &mut Tape, weight: Var, p: &Passport, stride: usize, padding: usize) -> Result<(Var, Var)> {
    let cin = tape.shape(weight).get(1).copied().unwrap_or(0);
    if p.shape()[0] != cin {
        return Err(Error::InvalidArgument(format!("passport has {} channels, conv expects {cin}", p.shape()[0])));
    }
    let mut one = |s: &Tensor| -> Result<Var> {
        let mut shape = vec![1];
        shape.extend_from_slice(s.shape());
        let x = tape.constant(s.clone().reshape(&shape)?);
        let y = tape.conv2d(x, weight, stride, padding)?;
        let pooled = tape.global_avg_pool(y)?;
        let c = tape.shape(pooled)[1];
        Ok(tape.reshape(pooled, &[c])?)
    };
    let gamma = one(&p.s_gamma)?;
    let beta = one(&p.s_beta)?;
    Ok((gamma, beta))
}

/// Eager form of [`derive_affine_on_tape`].
pub fn derive_affine(weight: &Tensor, p: &Passport, stride: usize, padding: usize) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let w = tape.constant(weight.clone());
    let (g, b) = derive_affine_on_tape(&mut tape, w, p, stride, padding)?;
    Ok((tape.value(g).clone(), tape.value(b).clone()))
}

/// Hinge on the signed scale factors: `sum_i max(0, margin - b_i * gamma_i)`.
pub fn sign_loss(tape: &mut Tape, gamma: Var, signature: &Signature, margin: f32) -> Result<Var> {
    if tape.value(gamma).numel() != signature.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scale factors vs {}-bit signature",
            tape.value(gamma).numel(),
            signature.len()
        )));
    }
    let b = tape.constant(Tensor::new(tape.shape(gamma).to_vec(), signature.as_f32())?);
    let bg = tape.mul(gamma, b)?;
    let neg = tape.mul_scalar(bg, -1.0);
    let slack = tape.add_scalar(neg, margin);
    let hinge = tape.relu(slack);
    Ok(tape.sum(hinge))
}

/// Plain evaluation of [`sign_loss`].
pub fn sign_loss_value(gamma: &[f32], signature: &Signature, margin: f32) -> f32 {
    gamma.iter().zip(signature.bits()).map(|(&g, &b)| (margin - b as f32 * g).max(0.0)).sum()
}

/// Serialize passports and signatures for the owner.
pub fn save_passports(passports: &PassportSet, signatures: &SignatureSet, spec_hash: &str) -> Vec<u8> {
    let mut tensors = BTreeMap::new();
    for (i, p) in passports {
        tensors.insert(format!("site{i}.s_gamma"), p.s_gamma.clone());
        tensors.insert(format!("site{i}.s_beta"), p.s_beta.clone());
    }
    let sigs: BTreeMap<String, &[i8]> = signatures.iter().map(|(i, s)| (i.to_string(), s.bits())).collect();
    Archive::new(tensors, json!({"spec_hash": spec_hash, "signatures": sigs})).to_bytes(PASSPORT_MAGIC)
}

pub fn load_passports(bytes: &[u8]) -> Result<(PassportSet, SignatureSet, String)> {
    let mut a = Archive::from_bytes(bytes, PASSPORT_MAGIC)?;
    let bad = |d: String| Error::format("passport file", d);
    let spec_hash = a.meta.get("spec_hash").and_then(|v| v.as_str()).ok_or_else(|| bad("no spec_hash".into()))?.to_string();
    let sigs: BTreeMap<String, Vec<i8>> = serde_json::from_value(a.meta.get("signatures").cloned().ok_or_else(|| bad("no signatures".into()))?)?;
    let mut signatures = SignatureSet::new();
    for (k, bits) in sigs {
        let site: usize = k.parse().map_err(|_| bad(format!("signature key `{k}`")))?;
        signatures.insert(site, Signature::new(bits)?);
    }
    let mut passports = PassportSet::new();
    for &site in signatures.keys() {
        let g = a.tensors.remove(&format!("site{site}.s_gamma")).ok_or_else(|| bad(format!("site {site} lacks s_gamma")))?;
        let b = a.tensors.remove(&format!("site{site}.s_beta")).ok_or_else(|| bad(format!("site {site} lacks s_beta")))?;
        passports.insert(site, Passport::new(g, b)?);
    }
    if let Some(extra) = a.tensors.keys().next() {
        return Err(bad(format!("unexpected tensor `{extra}`")));
    }
    Ok((passports, signatures, spec_hash))
}
