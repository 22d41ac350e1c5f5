//! Shared oracles for the integration tests.
#![allow(dead_code)]

pub mod gradcheck;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sedkit_core::numerics::{Array, Graph, Var};
use sedkit_core::Result;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;

/// Relative error with both values treated as equal when each is below
/// `1e-7` in magnitude.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

pub fn random_array(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Array<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Array::from_f64(shape, &data).unwrap()
}

/// Builds `f` on fresh leaves, reduces the output with fixed random weights
/// to a scalar, and compares reverse-mode gradients of every input entry
/// against central differences. Returns the worst relative error.
pub fn check_gradients<F>(inputs: &[Array<f64>], seed: u64, f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let weights = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|a| g.leaf(a.clone(), true)).collect();
        let out = f(&mut g, &vars).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        random_array(&mut rng, g.shape(out), 1.0)
    };
    let eval = |inputs: &[Array<f64>]| -> (f64, Vec<Array<f64>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|a| g.leaf(a.clone(), true)).collect();
        let out = f(&mut g, &vars).unwrap();
        let w = g.constant(weights.clone());
        let prod = g.mul(out, w).unwrap();
        let loss = g.sum(prod).unwrap();
        let value = g.value(loss).data()[0];
        let mut grads = g.backward(loss).unwrap();
        let grads = vars
            .iter()
            .zip(inputs)
            .map(|(&v, a)| grads.take(v).unwrap_or_else(|| Array::zeros(a.shape())))
            .collect();
        (value, grads)
    };
    let (_, analytic) = eval(inputs);
    let mut worst: f64 = 0.0;
    for (k, a) in inputs.iter().enumerate() {
        for i in 0..a.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic[k].data()[i], numeric));
        }
    }
    worst
}

/// Triple-loop `a @ b` for row-major matrices.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}
