#![allow(dead_code)]

pub mod dash_oracle;
pub mod metrics_oracle;
pub mod model_grad;
pub mod primitives;

use psgalign::autodiff::{Graph, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            // Box-Muller
            let u1: f64 = rng.random::<f64>().max(1e-300);
            let u2: f64 = rng.random();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Relative error between two gradient tensors, ‖a − n‖ / max(‖a‖, ‖n‖).
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-12)
}

/// Largest relative error over all inputs between reverse-mode gradients and
/// central finite differences with step `h`.
pub fn grad_check<F>(inputs: &[Tensor], h: f64, f: F) -> f64
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>, TensorError>,
{
    let g = Graph::with_finite_check(true);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&g, &vars).unwrap();
    let grads = g.backward(loss).unwrap();
    let eval = |xs: &[Tensor]| -> f64 {
        let g = Graph::with_finite_check(true);
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        f(&g, &vars).unwrap().item().unwrap()
    };
    let mut worst: f64 = 0.0;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let mut numeric = vec![0.0; inputs[k].len()];
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            numeric[i] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Reduce `out` to a scalar through a fixed random projection so every output
/// element contributes a distinct weight.
pub fn project<'g>(g: &'g Graph, out: Var<'g>, seed: u64) -> Result<Var<'g>, TensorError> {
    let w = randn(&mut rng(seed), &out.shape());
    out.mul(g.constant(w))?.sum()
}
