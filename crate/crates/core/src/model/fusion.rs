//! Multi-modality fusion and the small MLP heads used downstream.

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::modality::Modality;
use crate::rng::{stream, tag};

/// Temperature used when displaying learned gate weights.
pub const GATE_SHARPENING: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Concat,
    Mean,
    #[default]
    Gating,
}

/// Combine per-modality features of identical shape `[..., D]`.
///
/// Gating reads one scalar `gate.<m>` per modality from `gates` and mixes the
/// features with their softmax over the modalities present.
pub fn fuse<'g>(
    g: &'g Graph,
    features: &[(Modality, Var<'g>)],
    mode: FusionMode,
    gates: &ParamStore,
) -> Result<Var<'g>, ModelError> {
    let Some((_, first)) = features.first() else {
        return Err(ModelError::EmptyModalitySet);
    };
    let shape = first.shape();
    if let Some((m, f)) = features.iter().find(|(_, f)| f.shape() != shape) {
        return Err(ModelError::InvalidConfig(format!("{m} features {:?} differ from {shape:?}", f.shape())));
    }
    let vars: Vec<Var<'g>> = features.iter().map(|(_, f)| *f).collect();
    match mode {
        FusionMode::Concat => Ok(g.concat(&vars, shape.len() - 1)?),
        FusionMode::Mean => {
            let mut acc = vars[0];
            for v in &vars[1..] {
                acc = acc.add(*v)?;
            }
            Ok(acc.scale(1.0 / vars.len() as f64)?)
        }
        FusionMode::Gating => {
            let mut scalars = Vec::with_capacity(features.len());
            for (m, _) in features {
                let id = gates.id(&format!("gate.{m}")).ok_or(ModelError::UnknownModality(*m))?;
                scalars.push(g.param(gates, id));
            }
            let w = g.concat(&scalars, 0)?.softmax()?;
            let mut acc: Option<Var<'g>> = None;
            for (k, v) in vars.iter().enumerate() {
                let term = v.mul(w.slice(0, k, k + 1)?)?;
                acc = Some(match acc {
                    Some(a) => a.add(term)?,
                    None => term,
                });
            }
            Ok(acc.unwrap())
        }
    }
}

/// `softmax(g / temperature)`; the argmax matches that of `softmax(g)`.
pub fn gate_weights(gates: &[f64], temperature: f64) -> Vec<f64> {
    let z: Vec<f64> = gates.iter().map(|g| g / temperature).collect();
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Fusion followed by a two-layer MLP; its parameters (including the gate
/// scalars) live apart from the encoder.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub params: ParamStore,
    pub mode: FusionMode,
    pub modalities: Vec<Modality>,
    pub classes: usize,
}

impl ClassifierHead {
    /// `dim` is the per-modality feature width; the hidden width equals it.
    pub fn new(dim: usize, classes: usize, modalities: &[Modality], mode: FusionMode, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let fused = if mode == FusionMode::Concat { dim * modalities.len() } else { dim };
        for &m in modalities {
            params.insert(format!("gate.{m}"), Tensor::zeros(&[1]), false);
        }
        for (name, fan_in, fan_out) in [("head.0", fused, dim), ("head.1", dim, classes)] {
            let mut r = stream(seed, &[tag(name)]);
            let std = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| {
                    use rand_distr::Distribution;
                    rand_distr::Normal::new(0.0, std).unwrap().sample(&mut r)
                })
                .collect();
            params.insert(format!("{name}.w"), Tensor::new(&[fan_in, fan_out], w).unwrap(), true);
            params.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]), true);
        }
        Self {
            params,
            mode,
            modalities: modalities.to_vec(),
            classes,
        }
    }

    /// Logits `[..., classes]` from per-modality features.
    pub fn forward<'g>(&self, g: &'g Graph, features: &[(Modality, Var<'g>)]) -> Result<Var<'g>, ModelError> {
        let x = fuse(g, features, self.mode, &self.params)?;
        let p = |n: &str| g.param(&self.params, self.params.id(n).expect("head parameter"));
        let h = x.matmul(p("head.0.w"))?.add(p("head.0.b"))?.silu()?;
        Ok(h.matmul(p("head.1.w"))?.add(p("head.1.b"))?)
    }

    /// Current gate scalars in modality order.
    pub fn gates(&self) -> Vec<f64> {
        self.modalities
            .iter()
            .map(|m| self.params.value(self.params.id(&format!("gate.{m}")).unwrap()).data()[0])
            .collect()
    }
}
