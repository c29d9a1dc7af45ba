//! Accuracy and signature comparison metrics.

use forge_autodiff::{sign, Tensor};

use crate::error::{Error, Result};

/// Fraction of rows whose argmax equals the label; ties go to the lowest index.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f32> {
    let &[n, k] = logits.shape() else {
        return Err(Error::InvalidArgument(format!("accuracy needs [N, K] logits, got {:?}", logits.shape())));
    };
    if n != labels.len() {
        return Err(Error::InvalidArgument(format!("{n} logit rows for {} labels", labels.len())));
    }
    let hits = argmax_rows(logits.data(), k).zip(labels).filter(|(p, l)| p == *l).count();
    Ok(ratio(hits, n))
}

/// Predicted class per row, ties to the lowest index.
pub fn argmax_rows(data: &[f32], k: usize) -> impl Iterator<Item = usize> + '_ {
    data.chunks_exact(k).map(|row| {
        row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
    })
}

/// Bit dissimilarity rate: share of positions whose signs differ.
pub fn bdr(forged: &[f32], authorized: &[f32]) -> Result<f32> {
    check_len("bdr", forged.len(), authorized.len())?;
    let diff = forged.iter().zip(authorized).filter(|(a, b)| sign(**a) != sign(**b)).count();
    Ok(ratio(diff, forged.len()))
}

/// Share of positions with equal signs; `1 - bdr`.
pub fn sign_coincidence(a: &[f32], b: &[f32]) -> Result<f32> {
    check_len("sign_coincidence", a.len(), b.len())?;
    let same = a.iter().zip(b).filter(|(x, y)| sign(**x) == sign(**y)).count();
    Ok(ratio(same, a.len()))
}

/// Signature detection rate: share of extracted bits equal to the signature.
pub fn sdr<T: PartialEq>(extracted: &[T], signature: &[T]) -> Result<f32> {
    check_len("sdr", extracted.len(), signature.len())?;
    Ok(ratio(extracted.iter().zip(signature).filter(|(a, b)| a == b).count(), extracted.len()))
}

/// Share of positions where the bits differ; `1 - sdr`.
pub fn bit_error_rate<T: PartialEq>(extracted: &[T], signature: &[T]) -> Result<f32> {
    check_len("bit_error_rate", extracted.len(), signature.len())?;
    Ok(ratio(extracted.iter().zip(signature).filter(|(a, b)| a != b).count(), extracted.len()))
}

fn check_len(op: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::InvalidArgument(format!("{op}: lengths {a} and {b} differ")));
    }
    if a == 0 {
        return Err(Error::InvalidArgument(format!("{op}: empty input")));
    }
    Ok(())
}

fn ratio(count: usize, total: usize) -> f32 {
    (count as f64 / total as f64) as f32
}

/// One evaluated point, tagged with where it came from.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsRecord {
    pub run: String,
    pub site: Option<usize>,
    pub acc: f32,
    pub bdr: f32,
    pub sdr: f32,
}
