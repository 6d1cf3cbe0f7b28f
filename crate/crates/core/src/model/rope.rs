//! Rotary position encoding (rotate-half layout).

use crate::autodiff::{Graph, Tensor, TensorError, Var};

pub const ROPE_BASE: f64 = 10_000.0;

fn angle(pos: usize, k: usize, half: usize, base: f64) -> f64 {
    pos as f64 * base.powf(-(k as f64) / half as f64)
}

/// `cos` and `sin` tables of shape `[len, dim]`; entries `k` and `k + dim/2`
/// share the frequency `base^(-2k/dim)`.
pub fn rope_tables(len: usize, dim: usize, base: f64) -> (Tensor, Tensor) {
    assert!(dim % 2 == 0, "rotary dimension must be even");
    let half = dim / 2;
    let mut cos = vec![0.0; len * dim];
    let mut sin = vec![0.0; len * dim];
    for p in 0..len {
        for k in 0..half {
            let a = angle(p, k, half, base);
            for j in [k, k + half] {
                cos[p * dim + j] = a.cos();
                sin[p * dim + j] = a.sin();
            }
        }
    }
    (Tensor::new(&[len, dim], cos).unwrap(), Tensor::new(&[len, dim], sin).unwrap())
}

/// Rotate `x` of shape `[..., len, dim]` by its sequence position.
pub fn apply_rope<'g>(g: &'g Graph, x: Var<'g>, cos: &Tensor, sin: &Tensor) -> Result<Var<'g>, TensorError> {
    let shape = x.shape();
    let axis = shape.len() - 1;
    let half = shape[axis] / 2;
    let x1 = x.slice(axis, 0, half)?;
    let x2 = x.slice(axis, half, 2 * half)?;
    let rotated = g.concat(&[x2.neg()?, x1], axis)?;
    x.mul(g.constant(cos.clone()))?.add(rotated.mul(g.constant(sin.clone()))?)
}

/// Plain rotation of one vector placed at `pos`.
pub fn rotate(x: &[f64], pos: usize, base: f64) -> Vec<f64> {
    let half = x.len() / 2;
    let mut out = vec![0.0; x.len()];
    for k in 0..half {
        let (s, c) = angle(pos, k, half, base).sin_cos();
        out[k] = x[k] * c - x[k + half] * s;
        out[k + half] = x[k + half] * c + x[k] * s;
    }
    out
}

/// Attention logit `⟨R(m)q, R(n)k⟩` before scaling.
pub fn rotary_score(q: &[f64], k: &[f64], m: usize, n: usize, base: f64) -> f64 {
    rotate(q, m, base).iter().zip(rotate(k, n, base)).map(|(a, b)| a * b).sum()
}
