//! Timestep-wise contrastive objectives between two modality views.
//!
//! For anchors `i` (view a) and candidates `j` (view b) at timestep `t`,
//! `s[i,j,t]` is the cosine similarity of their aligned embeddings. The plain
//! InfoNCE loss contrasts the paired candidate `π(i)` against all others. The
//! demographic/site-weighted variant rescales every denominator term by a
//! metadata weight `ω[i,j]` and subtracts a margin from pseudo-negatives
//! (other segments of the anchor's own night):
//!
//! ```text
//! ℓ(i,t) = −log  exp(s[i,π(i),t]/τ) / Σ_j ω[i,j]·exp((s[i,j,t] − margin·h[i,j])/τ)
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{logsumexp_slice, Tensor, TensorError, Var};
use crate::recording::SubjectMeta;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DashError {
    #[error("zero-norm embedding row")]
    ZeroVector,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid objective config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(TensorError),
}

impl From<TensorError> for DashError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::ZeroVector { .. } => DashError::ZeroVector,
            e => DashError::Tensor(e),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DashConfig {
    pub tau: f64,
    pub sigma_age: f64,
    pub gamma_same: f64,
    pub gamma_diff: f64,
    pub delta_same: f64,
    pub delta_diff: f64,
    pub epsilon: f64,
    pub margin: f64,
    /// Age-kernel value used when either age is unknown.
    pub kappa_floor: f64,
    /// Average the a→b and b→a directions.
    pub bidirectional: bool,
    /// Average only over anchor timesteps masked in either view.
    pub loss_on_masked_only: bool,
}

impl Default for DashConfig {
    fn default() -> Self {
        Self {
            tau: 0.2,
            sigma_age: 20.0,
            gamma_same: 1.0,
            gamma_diff: 0.8,
            delta_same: 1.3,
            delta_diff: 0.8,
            epsilon: 1e-6,
            margin: 0.1,
            kappa_floor: 0.5,
            bidirectional: true,
            loss_on_masked_only: false,
        }
    }
}

impl DashConfig {
    pub fn validate(&self) -> Result<(), DashError> {
        let bad = |m: &str| Err(DashError::InvalidConfig(m.to_string()));
        if !(self.tau > 0.0) {
            return bad("tau must be > 0");
        }
        if !(self.sigma_age > 0.0) {
            return bad("sigma_age must be > 0");
        }
        if !(self.gamma_same > self.gamma_diff && self.gamma_diff >= 0.0) {
            return bad("need gamma_same > gamma_diff >= 0");
        }
        if !(self.delta_same > self.delta_diff && self.delta_diff >= 0.0) {
            return bad("need delta_same > delta_diff >= 0");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be > 0");
        }
        if !(self.margin >= 0.0) {
            return bad("margin must be >= 0");
        }
        if !(self.kappa_floor > 0.0 && self.kappa_floor <= 1.0) {
            return bad("kappa_floor must be in (0, 1]");
        }
        Ok(())
    }
}

/// Which contrastive objective a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    #[default]
    Dash,
    /// Unweighted InfoNCE without margin.
    InfoNce,
}

/// Normalized metadata weights and the pseudo-negative indicator, row-major `[B × B]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    pub b: usize,
    pub omega: Vec<f64>,
    pub pseudo: Vec<bool>,
}

impl WeightMatrix {
    pub fn uniform(b: usize) -> Self {
        Self {
            b,
            omega: vec![1.0 / b as f64; b * b],
            pseudo: vec![false; b * b],
        }
    }

    pub fn omega(&self, i: usize, j: usize) -> f64 {
        self.omega[i * self.b + j]
    }

    pub fn h(&self, i: usize, j: usize) -> bool {
        self.pseudo[i * self.b + j]
    }
}

/// Laplace age kernel; `kappa_floor` when either age is unknown.
pub fn kappa(a: Option<f64>, b: Option<f64>, cfg: &DashConfig) -> f64 {
    match (a, b) {
        (Some(a), Some(b)) => (-(a - b).abs() / cfg.sigma_age).exp(),
        _ => cfg.kappa_floor,
    }
}

fn gender_factor(a: &SubjectMeta, b: &SubjectMeta, cfg: &DashConfig) -> f64 {
    use crate::recording::Gender;
    if a.gender != Gender::Unknown && a.gender == b.gender {
        cfg.gamma_same
    } else {
        cfg.gamma_diff
    }
}

fn site_factor(a: &SubjectMeta, b: &SubjectMeta, cfg: &DashConfig) -> f64 {
    match (&a.site, &b.site) {
        (Some(x), Some(y)) if x == y => cfg.delta_same,
        _ => cfg.delta_diff,
    }
}

/// Unnormalized weight `α[i,j] = κ·s_g·s_c + ε·h`, floored at a tiny positive value.
pub fn raw_weight(a: &SubjectMeta, b: &SubjectMeta, pseudo: bool, cfg: &DashConfig) -> f64 {
    let alpha = kappa(a.age, b.age, cfg) * gender_factor(a, b, cfg) * site_factor(a, b, cfg)
        + if pseudo { cfg.epsilon } else { 0.0 };
    alpha.max(cfg.epsilon * 1e-12)
}

pub fn identity_pairing(b: usize) -> Vec<usize> {
    (0..b).collect()
}

pub fn inverse_pairing(pi: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; pi.len()];
    for (i, &p) in pi.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Metadata weights for anchors `metas_a` against candidates `metas_b`.
///
/// Pseudo-negatives are candidates from the anchor's own night other than the
/// paired one; night identity is `SubjectMeta::night_id`.
pub fn compute_weights_between(
    metas_a: &[SubjectMeta],
    metas_b: &[SubjectMeta],
    pi: &[usize],
    cfg: &DashConfig,
) -> WeightMatrix {
    let b = metas_a.len();
    let mut omega = vec![0.0; b * b];
    let mut pseudo = vec![false; b * b];
    for i in 0..b {
        let row = &mut omega[i * b..(i + 1) * b];
        for j in 0..b {
            let h = j != pi[i] && metas_a[i].night_id == metas_b[j].night_id;
            pseudo[i * b + j] = h;
            row[j] = raw_weight(&metas_a[i], &metas_b[j], h, cfg);
        }
        let total: f64 = row.iter().sum();
        for w in row.iter_mut() {
            *w /= total;
        }
    }
    WeightMatrix { b, omega, pseudo }
}

/// Weights for one batch in which both views come from the same segments.
pub fn compute_weights(metas: &[SubjectMeta], pi: &[usize], cfg: &DashConfig) -> WeightMatrix {
    compute_weights_between(metas, metas, pi, cfg)
}

fn check_views(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize), DashError> {
    if a.shape() != b.shape() || a.rank() != 3 {
        return Err(DashError::ShapeMismatch(format!(
            "views {:?} and {:?}, expected equal [B, L, d]",
            a.shape(),
            b.shape()
        )));
    }
    Ok((a.shape()[0], a.shape()[1], a.shape()[2]))
}

fn normalized_rows(x: &Tensor) -> Result<Vec<f64>, DashError> {
    let d = x.last_dim();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n < 1e-12 {
            return Err(DashError::ZeroVector);
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// Cosine similarities `s[i,j,t]`, shape `[B, B, L]`, from views `[B, L, d]`.
pub fn similarity(emb_a: &Tensor, emb_b: &Tensor) -> Result<Tensor, DashError> {
    let (b, l, d) = check_views(emb_a, emb_b)?;
    let na = normalized_rows(emb_a)?;
    let nb = normalized_rows(emb_b)?;
    let mut s = vec![0.0; b * b * l];
    for i in 0..b {
        for j in 0..b {
            for t in 0..l {
                let x = &na[(i * l + t) * d..(i * l + t + 1) * d];
                let y = &nb[(j * l + t) * d..(j * l + t + 1) * d];
                s[(i * b + j) * l + t] = x.iter().zip(y).map(|(p, q)| p * q).sum();
            }
        }
    }
    Ok(Tensor::new(&[b, b, l], s)?)
}

/// `s[j,i,t]`: the similarities seen from view b.
pub fn transpose_similarity(s: &Tensor) -> Tensor {
    s.permute(&[1, 0, 2])
}

/// Plain InfoNCE over all anchors and timesteps.
pub fn base_infonce(s: &Tensor, tau: f64, pi: &[usize]) -> f64 {
    directional(s, &WeightMatrix::uniform(s.shape()[0]), 0.0, tau, pi, None, false)
}

/// One-direction weighted loss from precomputed similarities.
///
/// With `weighted = false` the weights are ignored, giving plain InfoNCE.
fn directional(
    s: &Tensor,
    w: &WeightMatrix,
    margin: f64,
    tau: f64,
    pi: &[usize],
    anchor_mask: Option<&[bool]>,
    weighted: bool,
) -> f64 {
    let (b, l) = (s.shape()[0], s.shape()[2]);
    let sd = s.data();
    let mut logits = vec![0.0; b];
    let mut total = 0.0;
    let mut count = 0usize;
    for t in 0..l {
        for i in 0..b {
            if anchor_mask.is_some_and(|m| !m[i * l + t]) {
                continue;
            }
            for (j, lg) in logits.iter_mut().enumerate() {
                let mut z = sd[(i * b + j) * l + t] / tau;
                if weighted {
                    z += (w.omega(i, j) + 1e-300).ln();
                    if w.h(i, j) {
                        z -= margin / tau;
                    }
                }
                *lg = z;
            }
            total += logsumexp_slice(&logits) - sd[(i * b + pi[i]) * l + t] / tau;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Weighted loss with margin for a single direction, from similarities.
pub fn dash_loss_directional(
    s: &Tensor,
    w: &WeightMatrix,
    cfg: &DashConfig,
    pi: &[usize],
    anchor_mask: Option<&[bool]>,
) -> f64 {
    directional(s, w, cfg.margin, cfg.tau, pi, anchor_mask, true)
}

/// Two synchronized views of `B` segments and their metadata.
#[derive(Debug, Clone)]
pub struct AnchorBatch {
    /// `[B, L, d]` aligned embeddings of modality a.
    pub emb_a: Tensor,
    pub emb_b: Tensor,
    pub metas: Vec<SubjectMeta>,
    /// Candidate index paired with each anchor.
    pub pairing: Vec<usize>,
    /// Optional `[B × L]` flags selecting the timesteps that enter the average.
    pub anchor_mask: Option<Vec<bool>>,
}

impl AnchorBatch {
    pub fn new(emb_a: Tensor, emb_b: Tensor, metas: Vec<SubjectMeta>) -> Self {
        let b = metas.len();
        Self {
            emb_a,
            emb_b,
            metas,
            pairing: identity_pairing(b),
            anchor_mask: None,
        }
    }

    fn validate(&self) -> Result<(usize, usize), DashError> {
        let (b, l, _) = check_views(&self.emb_a, &self.emb_b)?;
        if self.metas.len() != b || self.pairing.len() != b {
            return Err(DashError::ShapeMismatch(format!(
                "{} metas and {} pairings for batch {b}",
                self.metas.len(),
                self.pairing.len()
            )));
        }
        let mut seen = vec![false; b];
        for &p in &self.pairing {
            if p >= b || std::mem::replace(&mut seen[p], true) {
                return Err(DashError::ShapeMismatch("pairing is not a permutation".into()));
            }
        }
        if self.anchor_mask.as_ref().is_some_and(|m| m.len() != b * l) {
            return Err(DashError::ShapeMismatch("anchor mask must be [B × L]".into()));
        }
        Ok((b, l))
    }
}

fn reverse_mask(mask: &[bool], pi: &[usize], l: usize) -> Vec<bool> {
    // Anchor j of view b is paired with anchor inv(j) of view a.
    let inv = inverse_pairing(pi);
    let mut out = vec![false; mask.len()];
    for (j, &i) in inv.iter().enumerate() {
        out[j * l..(j + 1) * l].copy_from_slice(&mask[i * l..(i + 1) * l]);
    }
    out
}

/// Weighted, margin-adjusted loss of a batch; halves the two directions when
/// `cfg.bidirectional` is set.
pub fn dash_loss(batch: &AnchorBatch, cfg: &DashConfig) -> Result<f64, DashError> {
    cfg.validate()?;
    let (_, l) = batch.validate()?;
    let pi = &batch.pairing;
    let s = similarity(&batch.emb_a, &batch.emb_b)?;
    let w = compute_weights(&batch.metas, pi, cfg);
    let mask = if cfg.loss_on_masked_only { batch.anchor_mask.as_deref() } else { None };
    let ab = dash_loss_directional(&s, &w, cfg, pi, mask);
    if !cfg.bidirectional {
        return Ok(ab);
    }
    let inv = inverse_pairing(pi);
    let wr = compute_weights(&batch.metas, &inv, cfg);
    let rmask = mask.map(|m| reverse_mask(m, pi, l));
    let ba = dash_loss_directional(&transpose_similarity(&s), &wr, cfg, &inv, rmask.as_deref());
    Ok(0.5 * (ab + ba))
}

fn one_hot(pi: &[usize]) -> Tensor {
    let b = pi.len();
    let mut p = vec![0.0; b * b];
    for (i, &j) in pi.iter().enumerate() {
        p[i * b + j] = 1.0;
    }
    Tensor::new(&[b, b], p).unwrap()
}

/// Per-element weights that turn a `[L, B]` loss grid into the requested mean.
fn reduction_weights(b: usize, l: usize, anchor_mask: Option<&[bool]>) -> Tensor {
    let data = match anchor_mask {
        None => vec![1.0 / (b * l) as f64; b * l],
        Some(m) => {
            let n = m.iter().filter(|&&x| x).count().max(1) as f64;
            let mut w = vec![0.0; b * l];
            for t in 0..l {
                for i in 0..b {
                    if m[i * l + t] {
                        w[t * b + i] = 1.0 / n;
                    }
                }
            }
            w
        }
    };
    Tensor::new(&[l, b], data).unwrap()
}

fn directional_graph<'g>(
    s: Var<'g>,
    bias: Option<Tensor>,
    pi: &[usize],
    tau: f64,
    anchor_mask: Option<&[bool]>,
) -> Result<Var<'g>, DashError> {
    let g = s.graph();
    let shape = s.shape();
    let (l, b) = (shape[0], shape[1]);
    let scaled = s.scale(1.0 / tau)?;
    let logits = match bias {
        Some(c) => scaled.add(g.constant(c))?,
        None => scaled,
    };
    let lse = logits.logsumexp()?;
    let pos = scaled.mul(g.constant(one_hot(pi)))?.sum_axis(2)?;
    let per_anchor = lse.sub(pos)?;
    Ok(per_anchor.mul(g.constant(reduction_weights(b, l, anchor_mask)))?.sum()?)
}

/// `ln(ω + 1e-300) − margin·h/τ`, the additive logit term of the weighted loss.
pub fn logit_bias(w: &WeightMatrix, margin: f64, tau: f64) -> Tensor {
    let data = w
        .omega
        .iter()
        .zip(&w.pseudo)
        .map(|(&o, &h)| (o + 1e-300).ln() - if h { margin / tau } else { 0.0 })
        .collect();
    Tensor::new(&[w.b, w.b], data).unwrap()
}

/// Differentiable contrastive loss between two `[B, L, d]` embedding vars.
///
/// Similarities are formed as one batched product over timesteps, `[L, B, B]`;
/// the reverse direction reuses its transpose.
pub fn contrastive_loss<'g>(
    emb_a: Var<'g>,
    emb_b: Var<'g>,
    metas: &[SubjectMeta],
    pi: &[usize],
    anchor_mask: Option<&[bool]>,
    cfg: &DashConfig,
    objective: Objective,
) -> Result<Var<'g>, DashError> {
    cfg.validate()?;
    let shape = emb_a.shape();
    if shape != emb_b.shape() || shape.len() != 3 || metas.len() != shape[0] || pi.len() != shape[0] {
        return Err(DashError::ShapeMismatch(format!(
            "views {shape:?} / {:?} with {} metas",
            emb_b.shape(),
            metas.len()
        )));
    }
    let l = shape[1];
    let na = emb_a.l2_normalize()?.permute(&[1, 0, 2])?;
    let nb = emb_b.l2_normalize()?.permute(&[1, 2, 0])?;
    let s = na.matmul(nb)?;
    let mask = if cfg.loss_on_masked_only { anchor_mask } else { None };
    let inv = inverse_pairing(pi);
    let (bias_ab, bias_ba) = match objective {
        Objective::Dash => (
            Some(logit_bias(&compute_weights(metas, pi, cfg), cfg.margin, cfg.tau)),
            Some(logit_bias(&compute_weights(metas, &inv, cfg), cfg.margin, cfg.tau)),
        ),
        Objective::InfoNce => (None, None),
    };
    let ab = directional_graph(s, bias_ab, pi, cfg.tau, mask)?;
    if !cfg.bidirectional {
        return Ok(ab);
    }
    let rmask = mask.map(|m| reverse_mask(m, pi, l));
    let ba = directional_graph(s.transpose(1, 2)?, bias_ba, &inv, cfg.tau, rmask.as_deref())?;
    Ok(ab.add(ba)?.scale(0.5)?)
}
