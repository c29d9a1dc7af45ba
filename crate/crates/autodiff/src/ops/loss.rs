use crate::error::{Error, Result};
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::Tensor;

impl Tape {
    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        let &[n, k] = shape else {
            return Err(Error::shape("cross_entropy", format!("need [N, K] logits, got {shape:?}")));
        };
        if labels.len() != n {
            return Err(Error::shape("cross_entropy", format!("{n} rows but {} labels", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0f32; n * k];
        let mut total = 0.0f64;
        for (i, &label) in labels.iter().enumerate() {
            let row = &z[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let sum: f64 = row.iter().map(|&v| ((v - max) as f64).exp()).sum();
            let log_sum = sum.ln();
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (((v - max) as f64).exp() / sum) as f32;
            }
            total += log_sum - (row[label] - max) as f64;
        }
        let loss = (total / n as f64) as f32;
        let rg = self.requires_grad(logits);
        Ok(self.push(Tensor::scalar(loss), rg, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `targets ∈ [0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f32]) -> Result<Var> {
        let z = self.value(logits).data();
        if z.len() != targets.len() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} logits but {} targets", z.len(), targets.len()),
            ));
        }
        let total: f64 = z
            .iter()
            .zip(targets)
            .map(|(&v, &t)| (v.max(0.0) - v * t) as f64 + (-(v.abs() as f64)).exp().ln_1p())
            .sum();
        let loss = (total / z.len() as f64) as f32;
        let rg = self.requires_grad(logits);
        Ok(self.push(Tensor::scalar(loss), rg, Op::BceWithLogits { logits, targets: targets.to_vec() }))
    }
}

pub(crate) fn cross_entropy_backward(sink: &mut GradSink, logits: Var, labels: &[usize], probs: &[f32], g: f32) {
    let n = labels.len();
    let k = probs.len() / n;
    let scale = g / n as f32;
    let mut gz: Vec<f32> = probs.iter().map(|p| p * scale).collect();
    for (i, &label) in labels.iter().enumerate() {
        gz[i * k + label] -= scale;
    }
    sink.add(logits, gz);
}

pub(crate) fn bce_backward(sink: &mut GradSink, logits: Var, targets: &[f32], g: f32) {
    let scale = g / targets.len() as f32;
    let gz = sink
        .value(logits)
        .data()
        .iter()
        .zip(targets)
        .map(|(&v, &t)| (super::elementwise::sigmoid(v) - t) * scale)
        .collect();
    sink.add(logits, gz);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros(&[3, 10]));
        let l = t.cross_entropy(z, &[0, 4, 9]).unwrap();
        assert!((t.value(l).item().unwrap() - 10f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn large_margin_drives_loss_to_zero() {
        let mut t = Tape::new();
        let mut prev = f32::INFINITY;
        for margin in [1.0f32, 5.0, 20.0, 100.0] {
            let z = t.constant(Tensor::new(vec![1, 3], vec![0.0, margin, 0.0]).unwrap());
            let lv = t.cross_entropy(z, &[1]).unwrap();
            let l = t.value(lv).item().unwrap();
            assert!(l < prev && l >= 0.0);
            prev = l;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn out_of_range_label() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros(&[1, 3]));
        assert_eq!(t.cross_entropy(z, &[3]).unwrap_err(), Error::LabelOutOfRange { label: 3, classes: 3 });
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros(&[4]));
        let l = t.bce_with_logits(z, &[0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!((t.value(l).item().unwrap() - 2f32.ln()).abs() < 1e-6);
    }
}
