//! Double-loop reference implementations of the contrastive losses and weights.

use psgalign::autodiff::Tensor;
use psgalign::dash::{AnchorBatch, DashConfig};
use psgalign::{Gender, SubjectMeta};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::randn;

/// s[i][j][t] by explicit dot products of separately normalized rows.
pub fn naive_sim(a: &Tensor, b: &Tensor) -> Vec<Vec<Vec<f64>>> {
    let (bs, l, d) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let at = |x: &Tensor, i: usize, t: usize, k: usize| x.data()[(i * l + t) * d + k];
    let norm = |x: &Tensor, i: usize, t: usize| (0..d).map(|k| at(x, i, t, k).powi(2)).sum::<f64>().sqrt();
    let mut s = vec![vec![vec![0.0; l]; bs]; bs];
    for i in 0..bs {
        for j in 0..bs {
            for t in 0..l {
                let mut dot = 0.0;
                for k in 0..d {
                    dot += at(a, i, t, k) * at(b, j, t, k);
                }
                s[i][j][t] = dot / (norm(a, i, t) * norm(b, j, t));
            }
        }
    }
    s
}

/// Direct evaluation of the weighted per-anchor loss, no log-sum-exp shift.
pub fn naive_loss(s: &[Vec<Vec<f64>>], omega: &[Vec<f64>], h: &[Vec<bool>], margin: f64, tau: f64) -> f64 {
    let b = s.len();
    let l = s[0][0].len();
    let mut total = 0.0;
    for t in 0..l {
        let mut per_t = 0.0;
        for i in 0..b {
            let num = (s[i][i][t] / tau).exp();
            let mut den = 0.0;
            for j in 0..b {
                let d = if h[i][j] { 1.0 } else { 0.0 };
                den += omega[i][j] * ((s[i][j][t] - margin * d) / tau).exp();
            }
            per_t += -(num / den).ln();
        }
        total += per_t / b as f64;
    }
    total / l as f64
}

pub fn naive_infonce(s: &[Vec<Vec<f64>>], tau: f64) -> f64 {
    let b = s.len();
    let ones = vec![vec![1.0; b]; b];
    naive_loss(s, &ones, &vec![vec![false; b]; b], 0.0, tau)
}

pub fn random_meta(r: &mut ChaCha8Rng, night: usize) -> SubjectMeta {
    let mut m = SubjectMeta::new(format!("n{night}"));
    m.age = if r.random_bool(0.85) { Some(r.random_range(18.0..90.0)) } else { None };
    m.gender = [Gender::F, Gender::M, Gender::Unknown][r.random_range(0..3)];
    m.site = if r.random_bool(0.9) { Some(format!("s{}", r.random_range(0..3))) } else { None };
    m
}

/// Weights recomputed from the defining formula.
pub fn naive_weights(metas: &[SubjectMeta], cfg: &DashConfig) -> (Vec<Vec<f64>>, Vec<Vec<bool>>) {
    let b = metas.len();
    let mut omega = vec![vec![0.0; b]; b];
    let mut h = vec![vec![false; b]; b];
    for i in 0..b {
        for j in 0..b {
            let k = match (metas[i].age, metas[j].age) {
                (Some(x), Some(y)) => (-(x - y).abs() / cfg.sigma_age).exp(),
                _ => cfg.kappa_floor,
            };
            let known = metas[i].gender != Gender::Unknown;
            let g = if known && metas[i].gender == metas[j].gender { cfg.gamma_same } else { cfg.gamma_diff };
            let c = if metas[i].site.is_some() && metas[i].site == metas[j].site { cfg.delta_same } else { cfg.delta_diff };
            h[i][j] = i != j && metas[i].night_id == metas[j].night_id;
            omega[i][j] = k * g * c + if h[i][j] { cfg.epsilon } else { 0.0 };
        }
        let sum: f64 = omega[i].iter().sum();
        omega[i].iter_mut().for_each(|w| *w /= sum);
    }
    (omega, h)
}

pub fn random_batch(r: &mut ChaCha8Rng, b: usize, l: usize, d: usize, nights: usize) -> AnchorBatch {
    let a = randn(r, &[b, l, d]);
    let e = randn(r, &[b, l, d]);
    let metas = (0..b).map(|i| random_meta(r, i % nights)).collect();
    AnchorBatch::new(a, e, metas)
}

/// Unidirectional config used against the single-direction oracles.
pub fn one_way() -> DashConfig {
    DashConfig {
        bidirectional: false,
        ..DashConfig::default()
    }
}

/// Metadata that makes every weight equal: same age/gender/site, distinct nights.
pub fn homogeneous(b: usize) -> Vec<SubjectMeta> {
    (0..b)
        .map(|i| {
            let mut m = SubjectMeta::new(format!("n{i}"));
            m.age = Some(40.0);
            m.gender = Gender::M;
            m.site = Some("s".into());
            m
        })
        .collect()
}
