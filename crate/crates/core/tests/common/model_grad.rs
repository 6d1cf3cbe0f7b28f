//! Finite-difference check over the trainable parameters of a whole model.

use psgalign::autodiff::{Graph, Var};
use psgalign::model::AlignmentModel;
use rand::Rng;

/// Reverse-mode parameter gradients against central differences on a sample
/// of entries from every parameter tensor.
pub fn check_param_grads<F>(model: &AlignmentModel, loss: F, samples: usize) -> f64
where
    F: for<'g> Fn(&AlignmentModel, &'g Graph) -> Var<'g>,
{
    let g = Graph::new();
    let l = loss(model, &g);
    let grads = g.backward(l).unwrap();
    let mut store = model.params.clone();
    store.zero_grads();
    g.accumulate_into(&grads, &mut store);
    let mut r = super::rng(99);
    let h = 1e-5;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for id in model.params.ids().collect::<Vec<_>>() {
        if !model.params.is_trainable(id) {
            continue;
        }
        let Some(grad) = store.grad(id).map(|t| t.data().to_vec()) else {
            continue;
        };
        let n = grad.len();
        for _ in 0..samples.min(n) {
            let k = r.random_range(0..n);
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.params.value_mut(id).data_mut()[k] += delta;
                let g = Graph::new();
                loss(&m, &g).item().unwrap()
            };
            analytic.push(grad[k]);
            numeric.push((eval(h) - eval(-h)) / (2.0 * h));
        }
    }
    super::rel_err(&analytic, &numeric)
}
