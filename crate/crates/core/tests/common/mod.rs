#![allow(dead_code)]

use forge_autodiff::{Tape, Tensor, Var};
use forge_core::data::{synthetic, Dataset, SyntheticSpec};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Uniform entries in ±[lo, 1].
pub fn away_from_zero(shape: &[usize], lo: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f32 = rng.gen_range(lo..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn rel_err(a: &[f32], b: &[f32]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    diff / (na + nb).max(1e-6)
}

/// Worst relative error between backward and central differences (step
/// 1e-3) over all inputs of `build`, after a fixed random reduction of the
/// output to a scalar.
pub fn check_grads(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    check_grads_with_step(inputs, build, 1e-3)
}

/// [`check_grads`] with a chosen step. Smooth compositions tolerate a wider
/// step, which keeps f32 cancellation out of small gradients.
pub fn check_grads_with_step(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var, step: f32) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars);
    let weights = Tensor::uniform(tape.shape(out), -1.0, 1.0, &mut rng(0xfeed));
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).data().iter().zip(weights.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
    };
    let mut worst = 0.0f64;
    for i in 0..inputs.len() {
        let mut numeric = vec![0.0f32; inputs[i].numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += step;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= step;
            let dx = plus[i].data()[j] as f64 - minus[i].data()[j] as f64;
            *slot = ((eval(&plus) - eval(&minus)) / dx) as f32;
        }
        worst = worst.max(rel_err(&analytic[i], &numeric));
    }
    worst
}

/// A few hundred generated images, for tests that train.
pub fn tiny_data() -> (Dataset, Dataset) {
    synthetic(&SyntheticSpec { train: 240, test: 80, ..SyntheticSpec::default() }).unwrap()
}
