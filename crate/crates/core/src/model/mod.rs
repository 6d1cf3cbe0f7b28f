//! Alignment encoder: per-modality MLP tokenizers, mask and `[CLS]` tokens, a
//! pre-norm rotary transformer, a projection head shared by all modalities,
//! LoRA adapters and fusion heads.
//!
//! Parameter names:
//!
//! ```text
//! tok.<m>.{l1,l2}.{w,b}   tok.<m>.wres   tok.<m>.ln.{g,b}   mask.<m>   cls
//! backbone.layer<i>.{ln1,q,k,v,o,ln2,ff1,ff2}.*   backbone.ln_f.*
//! proj.{0,1,2}.{w,b}   lora.layer<i>.{q,k,v}.{A,B}
//! ```

mod fusion;
mod rope;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, TensorError, Var};
use crate::modality::Modality;
use crate::rng::{derive_seed, stream, tag};

pub use fusion::{fuse, gate_weights, ClassifierHead, FusionMode, GATE_SHARPENING};
pub use rope::{apply_rope, rope_tables, rotary_score, rotate, ROPE_BASE};

/// Longest sequence the encoder accepts, `[CLS]` included.
pub const MAX_SEQ: usize = 121;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("{modality} tokens must have width {expected}, got {got}")]
    WrongTokenWidth { modality: Modality, expected: usize, got: usize },
    #[error("sequence of {len} tokens plus [CLS] exceeds {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("model already carries LoRA adapters")]
    AlreadyAdapted,
    #[error("no modality features to fuse")]
    EmptyModalitySet,
    #[error("model has no tokenizer for {0}")]
    UnknownModality(Modality),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizePreset {
    /// Laptop-scale default: D=64, 2 layers, 4 heads.
    Desk,
    Small,
    Medium,
    Large,
}

impl SizePreset {
    /// `(hidden_dim, layers, heads)`.
    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            SizePreset::Desk => (64, 2, 4),
            SizePreset::Small => (512, 8, 16),
            SizePreset::Medium => (768, 12, 16),
            SizePreset::Large => (1024, 16, 16),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// When set, overrides `hidden_dim`, `layers` and `heads` (see [`ModelConfig::resolved`]).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_preset: Option<SizePreset>,
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub align_dim: usize,
    pub dropout: f64,
    /// Feed-forward inner width as a multiple of `hidden_dim`.
    pub ff_mult: usize,
    pub rope_base: f64,
    pub token_dims: BTreeMap<Modality, usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::preset(SizePreset::Desk)
    }
}

impl ModelConfig {
    pub fn preset(p: SizePreset) -> Self {
        let (hidden_dim, layers, heads) = p.dims();
        Self {
            size_preset: Some(p),
            hidden_dim,
            layers,
            heads,
            align_dim: 128,
            dropout: 0.1,
            ff_mult: 4,
            rope_base: ROPE_BASE,
            token_dims: Modality::ALL.iter().map(|&m| (m, m.token_width())).collect(),
        }
    }

    /// Apply the size preset, if any, to the explicit dimensions.
    pub fn resolved(mut self) -> Self {
        if let Some(p) = self.size_preset {
            (self.hidden_dim, self.layers, self.heads) = p.dims();
        }
        self
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.heads == 0 || self.hidden_dim == 0 || self.hidden_dim % self.heads != 0 {
            return bad(format!("hidden_dim {} not divisible by heads {}", self.hidden_dim, self.heads));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head dimension {} must be even for rotary encoding", self.head_dim()));
        }
        if self.align_dim == 0 || self.ff_mult == 0 {
            return bad("align_dim and ff_mult must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    Query,
    Key,
    Value,
}

impl LoraTarget {
    fn short(self) -> &'static str {
        match self {
            LoraTarget::Query => "q",
            LoraTarget::Key => "k",
            LoraTarget::Value => "v",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub targets: Vec<LoraTarget>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            dropout: 0.05,
            targets: vec![LoraTarget::Query, LoraTarget::Key, LoraTarget::Value],
        }
    }
}

/// Random streams for one forward pass; `None` disables dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stochastic {
    pub seed: u64,
}

impl Stochastic {
    fn site(self, tags: &[u64]) -> u64 {
        derive_seed(self.seed, tags)
    }
}

/// Graph nodes produced by [`AlignmentModel::encode`].
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars<'g> {
    /// `[B, D]`
    pub cls: Var<'g>,
    /// `[B, L, D]`, `[CLS]` excluded.
    pub hidden: Var<'g>,
    /// `[B, L, align_dim]`
    pub aligned: Var<'g>,
}

/// Plain values of one encoder pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub cls: Tensor,
    pub hidden: Tensor,
    pub aligned: Tensor,
}

#[derive(Debug, Clone)]
pub struct AlignmentModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub lora: Option<LoraConfig>,
    seed: u64,
}

fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).unwrap()
}

impl AlignmentModel {
    /// Fresh model with tokenizers for `modalities`.
    ///
    /// Every parameter is drawn from its own stream keyed by `(seed, name)`, so
    /// adding a modality later leaves the others untouched.
    pub fn new(config: ModelConfig, modalities: &[Modality], seed: u64) -> Result<Self, ModelError> {
        let config = config.resolved();
        config.validate()?;
        let mut model = Self {
            config,
            params: ParamStore::new(),
            lora: None,
            seed,
        };
        let d = model.config.hidden_dim;
        model.add_token("cls", &[d], 0.02);
        for i in 0..model.config.layers {
            let p = format!("backbone.layer{i}");
            model.add_norm(&format!("{p}.ln1"), d);
            for w in ["q", "k", "v", "o"] {
                model.add_linear(&format!("{p}.{w}"), d, d);
            }
            model.add_norm(&format!("{p}.ln2"), d);
            let f = model.config.ff_mult * d;
            model.add_linear(&format!("{p}.ff1"), d, f);
            model.add_linear(&format!("{p}.ff2"), f, d);
        }
        model.add_norm("backbone.ln_f", d);
        model.add_linear("proj.0", d, d);
        model.add_linear("proj.1", d, d);
        model.add_linear("proj.2", d, model.config.align_dim);
        for &m in modalities {
            model.add_modality(m)?;
        }
        Ok(model)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn init_rng(&self, name: &str) -> rand_chacha::ChaCha8Rng {
        stream(self.seed, &[tag(name)])
    }

    fn add_token(&mut self, name: &str, shape: &[usize], std: f64) {
        let v = normal(&mut self.init_rng(name), shape, std);
        self.params.insert(name, v, true);
    }

    fn add_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        let w = normal(&mut self.init_rng(prefix), &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt());
        self.params.insert(format!("{prefix}.w"), w, true);
        self.params.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]), true);
    }

    fn add_norm(&mut self, prefix: &str, d: usize) {
        self.params.insert(format!("{prefix}.g"), Tensor::full(&[d], 1.0), false);
        self.params.insert(format!("{prefix}.b"), Tensor::zeros(&[d]), false);
    }

    /// Register a tokenizer and mask token for `m`; a no-op if present.
    pub fn add_modality(&mut self, m: Modality) -> Result<bool, ModelError> {
        if self.has_modality(m) {
            return Ok(false);
        }
        let input = *self
            .config
            .token_dims
            .get(&m)
            .ok_or_else(|| ModelError::InvalidConfig(format!("no token width for {m}")))?;
        let d = self.config.hidden_dim;
        let p = format!("tok.{m}");
        self.add_linear(&format!("{p}.l1"), input, 2 * d);
        self.add_linear(&format!("{p}.l2"), 2 * d, d);
        let wres = normal(&mut self.init_rng(&format!("{p}.wres")), &[input, d], 1.0 / (input as f64).sqrt());
        self.params.insert(format!("{p}.wres"), wres, true);
        self.add_norm(&format!("{p}.ln"), d);
        self.add_token(&format!("mask.{m}"), &[d], 0.02);
        if self.lora.is_some() {
            // Adapted models keep everything but the adapters frozen.
            for id in self.params.ids().collect::<Vec<_>>() {
                if self.params.name(id).starts_with(&p) || self.params.name(id) == format!("mask.{m}") {
                    self.params.set_trainable(id, false);
                }
            }
        }
        Ok(true)
    }

    pub fn has_modality(&self, m: Modality) -> bool {
        self.params.id(&format!("mask.{m}")).is_some()
    }

    pub fn modalities(&self) -> Vec<Modality> {
        Modality::ALL.iter().copied().filter(|&m| self.has_modality(m)).collect()
    }

    fn id(&self, name: &str) -> ParamId {
        self.params.id(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    fn p<'g>(&self, g: &'g Graph, name: &str) -> Var<'g> {
        g.param(&self.params, self.id(name))
    }

    fn linear<'g>(&self, g: &'g Graph, x: Var<'g>, prefix: &str) -> Result<Var<'g>, TensorError> {
        x.matmul(self.p(g, &format!("{prefix}.w")))?.add(self.p(g, &format!("{prefix}.b")))
    }

    fn norm<'g>(&self, g: &'g Graph, x: Var<'g>, prefix: &str) -> Result<Var<'g>, TensorError> {
        x.layer_norm(self.p(g, &format!("{prefix}.g")), self.p(g, &format!("{prefix}.b")), LN_EPS)
    }

    fn maybe_dropout<'g>(x: Var<'g>, p: f64, st: Option<Stochastic>, tags: &[u64]) -> Result<Var<'g>, TensorError> {
        match st {
            Some(s) if p > 0.0 => x.dropout(p, s.site(tags)),
            _ => Ok(x),
        }
    }

    /// Epoch tokens `[..., in]` → embeddings `[..., D]`:
    /// `LayerNorm(W2·drop(SiLU(W1·x)) + Wres·x)`.
    pub fn tokenize<'g>(
        &self,
        g: &'g Graph,
        m: Modality,
        x: Var<'g>,
        st: Option<Stochastic>,
    ) -> Result<Var<'g>, ModelError> {
        if !self.has_modality(m) {
            return Err(ModelError::UnknownModality(m));
        }
        let shape = x.shape();
        let expected = self.config.token_dims[&m];
        let got = *shape.last().unwrap_or(&0);
        if got != expected {
            return Err(ModelError::WrongTokenWidth { modality: m, expected, got });
        }
        let n = shape.iter().product::<usize>() / expected;
        let flat = x.reshape(&[n, expected])?;
        let p = format!("tok.{m}");
        let h = self.linear(g, flat, &format!("{p}.l1"))?.silu()?;
        let h = Self::maybe_dropout(h, self.config.dropout, st, &[tag(&p)])?;
        let h = self.linear(g, h, &format!("{p}.l2"))?;
        let r = flat.matmul(self.p(g, &format!("{p}.wres")))?;
        let out = self.norm(g, h.add(r)?, &format!("{p}.ln"))?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.config.hidden_dim;
        Ok(out.reshape(&out_shape)?)
    }

    /// Replace flagged positions of `[B, L, D]` tokens with the modality's mask embedding.
    pub fn mask_tokens<'g>(
        &self,
        g: &'g Graph,
        tokens: Var<'g>,
        m: Modality,
        mask: &[bool],
    ) -> Result<Var<'g>, ModelError> {
        if !mask.iter().any(|&b| b) {
            return Ok(tokens);
        }
        if !self.has_modality(m) {
            return Err(ModelError::UnknownModality(m));
        }
        Ok(tokens.mask_rows(self.p(g, &format!("mask.{m}")), mask)?)
    }

    /// Draw a mask at `rate` and apply it.
    pub fn apply_mask<'g>(
        &self,
        g: &'g Graph,
        tokens: Var<'g>,
        m: Modality,
        rate: f64,
        seed: u64,
    ) -> Result<(Var<'g>, Vec<bool>), ModelError> {
        let shape = tokens.shape();
        let n = shape[..shape.len() - 1].iter().product();
        let mask = sample_mask(n, rate, seed);
        Ok((self.mask_tokens(g, tokens, m, &mask)?, mask))
    }

    fn attention<'g>(
        &self,
        g: &'g Graph,
        x: Var<'g>,
        layer: usize,
        rope: &(Tensor, Tensor),
        st: Option<Stochastic>,
    ) -> Result<Var<'g>, TensorError> {
        let shape = x.shape();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let (h, dh) = (self.config.heads, self.config.head_dim());
        let p = format!("backbone.layer{layer}");
        let split = |v: Var<'g>| -> Result<Var<'g>, TensorError> { v.reshape(&[b, t, h, dh])?.permute(&[0, 2, 1, 3]) };
        let q = split(self.adapted(g, x, layer, LoraTarget::Query, st)?)?;
        let k = split(self.adapted(g, x, layer, LoraTarget::Key, st)?)?;
        let v = split(self.adapted(g, x, layer, LoraTarget::Value, st)?)?;
        let q = apply_rope(g, q, &rope.0, &rope.1)?.reshape(&[b * h, t, dh])?;
        let k = apply_rope(g, k, &rope.0, &rope.1)?.reshape(&[b * h, t, dh])?;
        let v = v.reshape(&[b * h, t, dh])?;
        let att = q
            .matmul(k.transpose(1, 2)?)?
            .scale(1.0 / (dh as f64).sqrt())?
            .softmax()?;
        let ctx = att
            .matmul(v)?
            .reshape(&[b, h, t, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, t, d])?;
        self.linear(g, ctx, &format!("{p}.o"))
    }

    /// Query/key/value projection with an optional low-rank update.
    fn adapted<'g>(
        &self,
        g: &'g Graph,
        x: Var<'g>,
        layer: usize,
        target: LoraTarget,
        st: Option<Stochastic>,
    ) -> Result<Var<'g>, TensorError> {
        let w = target.short();
        let base = self.linear(g, x, &format!("backbone.layer{layer}.{w}"))?;
        let Some(cfg) = self.lora.as_ref().filter(|c| c.targets.contains(&target)) else {
            return Ok(base);
        };
        let p = format!("lora.layer{layer}.{w}");
        let xin = Self::maybe_dropout(x, cfg.dropout, st, &[tag(&p)])?;
        let delta = xin.matmul(self.p(g, &format!("{p}.A")))?.matmul(self.p(g, &format!("{p}.B")))?;
        base.add(delta.scale(cfg.alpha / cfg.rank as f64)?)
    }

    /// Backbone over `[B, L, D]` tokens; returns the final-normed `[B, L+1, D]` states.
    pub fn backbone<'g>(&self, g: &'g Graph, tokens: Var<'g>, st: Option<Stochastic>) -> Result<Var<'g>, ModelError> {
        let shape = tokens.shape();
        if shape.len() != 3 || shape[2] != self.config.hidden_dim {
            return Err(ModelError::Tensor(TensorError::ShapeMismatch {
                op: "encode",
                lhs: shape,
                rhs: vec![0, 0, self.config.hidden_dim],
            }));
        }
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        if l + 1 > MAX_SEQ {
            return Err(ModelError::SequenceTooLong { len: l, max: MAX_SEQ });
        }
        let cls = self.p(g, "cls").reshape(&[1, 1, d])?.broadcast_to(&[b, 1, d])?;
        let mut x = g.concat(&[cls, tokens], 1)?;
        let rope = rope_tables(l + 1, self.config.head_dim(), self.config.rope_base);
        let p_drop = self.config.dropout;
        for i in 0..self.config.layers {
            let p = format!("backbone.layer{i}");
            let a = self.attention(g, self.norm(g, x, &format!("{p}.ln1"))?, i, &rope, st)?;
            x = x.add(Self::maybe_dropout(a, p_drop, st, &[tag(&p), 1])?)?;
            let f = self.linear(g, self.norm(g, x, &format!("{p}.ln2"))?, &format!("{p}.ff1"))?.silu()?;
            let f = self.linear(g, f, &format!("{p}.ff2"))?;
            x = x.add(Self::maybe_dropout(f, p_drop, st, &[tag(&p), 2])?)?;
        }
        Ok(self.norm(g, x, "backbone.ln_f")?)
    }

    /// Shared projection head `[..., D]` → `[..., align_dim]`.
    pub fn project<'g>(&self, g: &'g Graph, hidden: Var<'g>) -> Result<Var<'g>, ModelError> {
        let h = self.linear(g, hidden, "proj.0")?.silu()?;
        let h = self.linear(g, h, "proj.1")?.silu()?;
        Ok(self.linear(g, h, "proj.2")?)
    }

    /// `[CLS]` state, content states and their aligned projections.
    pub fn encode<'g>(&self, g: &'g Graph, tokens: Var<'g>, st: Option<Stochastic>) -> Result<EncoderVars<'g>, ModelError> {
        let states = self.backbone(g, tokens, st)?;
        let t = states.shape()[1];
        let d = self.config.hidden_dim;
        let b = states.shape()[0];
        let cls = states.slice(1, 0, 1)?.reshape(&[b, d])?;
        let hidden = states.slice(1, 1, t)?;
        let aligned = self.project(g, hidden)?;
        Ok(EncoderVars { cls, hidden, aligned })
    }

    /// Inference pass on raw `[B, L, in]` epochs of one modality, no dropout.
    pub fn encode_values(&self, m: Modality, epochs: &Tensor) -> Result<EncoderOutput, ModelError> {
        let g = Graph::new();
        let tokens = self.tokenize(&g, m, g.constant(epochs.clone()), None)?;
        let out = self.encode(&g, tokens, None)?;
        Ok(EncoderOutput {
            cls: (*out.cls.value()).clone(),
            hidden: (*out.hidden.value()).clone(),
            aligned: (*out.aligned.value()).clone(),
        })
    }

    /// Freeze the base model and add trainable low-rank adapters.
    pub fn attach_lora(&mut self, cfg: LoraConfig) -> Result<(), ModelError> {
        if self.lora.is_some() {
            return Err(ModelError::AlreadyAdapted);
        }
        if cfg.rank == 0 {
            return Err(ModelError::InvalidConfig("LoRA rank must be >= 1".into()));
        }
        self.params.freeze_all();
        let d = self.config.hidden_dim;
        for i in 0..self.config.layers {
            for t in &cfg.targets {
                let p = format!("lora.layer{i}.{}", t.short());
                let a = normal(&mut self.init_rng(&p), &[d, cfg.rank], 1.0 / (d as f64).sqrt());
                self.params.insert(format!("{p}.A"), a, true);
                self.params.insert(format!("{p}.B"), Tensor::zeros(&[cfg.rank, d]), true);
            }
        }
        self.lora = Some(cfg);
        Ok(())
    }

    /// SHA-256 over every parameter that is not a LoRA adapter.
    pub fn base_fingerprint(&self) -> String {
        self.params.fingerprint(|name| !name.starts_with("lora."))
    }

    /// Ids of trainable parameters, in registration order.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.params.ids().filter(|&id| self.params.is_trainable(id)).collect()
    }
}

/// Independent Bernoulli(`rate`) flags for `n` positions.
pub fn sample_mask(n: usize, rate: f64, seed: u64) -> Vec<bool> {
    assert!((0.0..1.0).contains(&rate), "mask rate {rate} outside [0, 1)");
    if rate == 0.0 {
        return vec![false; n];
    }
    let mut r = stream(seed, &[tag("mask")]);
    (0..n).map(|_| r.random::<f64>() < rate).collect()
}
