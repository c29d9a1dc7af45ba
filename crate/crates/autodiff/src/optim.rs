use crate::error::{Error, Result};
use crate::param::ParamStore;

/// Stochastic gradient descent with heavy-ball momentum.
///
/// Per trainable parameter: `v ← momentum·v + g`, then
/// `p ← p − lr·(v + weight_decay·p)`. Gradients are cleared afterwards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Sgd { lr, momentum, weight_decay }
    }

    pub fn step(&self, store: &mut ParamStore) -> Result<()> {
        if let Some(p) = store.iter().map(|(_, p)| p).find(|p| p.trainable && p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name().to_string()));
        }
        for p in store.iter_mut().filter(|p| p.trainable) {
            let grad = p.grad.take().expect("checked above");
            let v = p.velocity.get_or_insert_with(|| vec![0.0; grad.numel()]);
            for (vi, gi) in v.iter_mut().zip(grad.data()) {
                *vi = self.momentum * *vi + gi;
            }
            for (w, vi) in p.value.data_mut().iter_mut().zip(v.iter()) {
                *w -= self.lr * (vi + self.weight_decay * *w);
            }
        }
        Ok(())
    }
}

/// Adam with bias-corrected moment estimates and no weight decay.
///
/// Per trainable parameter: `m ← β1·m + (1−β1)·g`, `v ← β2·v + (1−β2)·g²`,
/// then `p ← p − lr·m̂ / (√v̂ + eps)` where `m̂ = m / (1−β1ᵗ)` and
/// `v̂ = v / (1−β2ᵗ)`. Gradients are cleared afterwards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: i32,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(p) = store.iter().map(|(_, p)| p).find(|p| p.trainable && p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name().to_string()));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for p in store.iter_mut().filter(|p| p.trainable) {
            let grad = p.grad.take().expect("checked above");
            let m = p.velocity.get_or_insert_with(|| vec![0.0; grad.numel()]);
            let v = p.second_moment.get_or_insert_with(|| vec![0.0; grad.numel()]);
            for ((w, g), (mi, vi)) in p.value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut().zip(v.iter_mut())) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
