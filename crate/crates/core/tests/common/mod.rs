#![allow(dead_code)]

use advrf::tensor::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn64(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut rng(seed))
}

/// Central-difference gradient of a scalar function of one tensor.
pub fn numeric_grad(
    x: &Tensor<f64>,
    step: f64,
    f: &dyn for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Var<'g, f64>,
) -> Vec<f64> {
    let eval = |t: Tensor<f64>| {
        let g = Graph::new();
        let v = g.constant(t);
        f(&g, v).item()
    };
    (0..x.numel())
        .map(|i| {
            let mut plus = x.clone();
            plus.data_mut()[i] += step;
            let mut minus = x.clone();
            minus.data_mut()[i] -= step;
            (eval(plus) - eval(minus)) / (2.0 * step)
        })
        .collect()
}

pub fn analytic_grad(
    x: &Tensor<f64>,
    f: &dyn for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Var<'g, f64>,
) -> Vec<f64> {
    let g = Graph::new();
    let v = g.variable(x.clone());
    let loss = f(&g, v);
    let grads = g.backward(loss).unwrap();
    grads
        .get(v)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()])
}

/// Max over entries of |a−n| / max(|a|, |n|, floor).
pub fn max_rel_err(a: &[f64], n: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(n)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn check_grad(
    x: &Tensor<f64>,
    f: &dyn for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Var<'g, f64>,
) -> f64 {
    let a = analytic_grad(x, f);
    let n = numeric_grad(x, 1e-3, f);
    max_rel_err(&a, &n, 1e-2)
}

/// Pins a closure to the higher-ranked signature the gradient checkers expect.
pub fn scalar_fn<F>(f: F) -> F
where
    F: for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Var<'g, f64>,
{
    f
}
