//! Central finite-difference oracle for tape gradients.
//!
//! The function under test is evaluated on an inference-only graph at
//! perturbed inputs, so the numeric side never touches a backward closure.
#![allow(dead_code)]

use hst_core::numerics::{Graph, Tensor, Var};
use hst_core::Result;
use rand::{Rng, SeedableRng};

pub const STEP: f64 = 1e-5;

/// Random tensor with entries uniform in `[-1, 1)`.
pub fn random_tensor(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn projected<F>(f: &F, inputs: &[Tensor], weights: &Tensor) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
    let out = f(&mut g, &vars).unwrap();
    g.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
}

/// Maximum over inputs of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`
/// (vector 2-norms) for the scalar `sum(f(inputs) * R)` with a fixed random `R`.
pub fn max_relative_error<F>(inputs: &[Tensor], f: F, seed: u64) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone()).unwrap()).collect();
    let out = f(&mut g, &vars).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let weights = random_tensor(&mut rng, g.shape(out));
    let w = g.constant(weights.clone()).unwrap();
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum(prod).unwrap();
    let grads = g.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(vars[k]) {
            Some(a) => a.to_vec(),
            None => vec![0.0; input.numel()],
        };
        let mut numeric = vec![0.0; input.numel()];
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            numeric[i] = (projected(&f, &plus, &weights) - projected(&f, &minus, &weights)) / (2.0 * STEP);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(diff / na.max(nn).max(1e-8));
    }
    worst
}
