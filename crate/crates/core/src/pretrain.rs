//! Contrastive pre-training: modality-pair batches, independent masking of the
//! two views, DASH (or InfoNCE) loss and AdamW, with exact checkpoint resume.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    adamw_step, AdamWConfig, Checkpoint, CheckpointError, Graph, OptimizerState, RngState, Tensor, TensorError,
};
use crate::corpus::{Corpus, Split};
use crate::dash::{contrastive_loss, DashConfig, DashError, Objective};
use crate::model::{AlignmentModel, ModelConfig, ModelError, SizePreset, Stochastic, MAX_SEQ};
use crate::modality::Modality;
use crate::recording::SubjectMeta;
use crate::rng::{derive_seed, stream, tag};

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("no pretrain night carries two allowed modalities over {0} epochs")]
    NoPairableData(usize),
    #[error("non-finite loss at step {step} (pair {pair}, nights {nights:?})")]
    NonFiniteLoss { step: u64, pair: String, nights: Vec<String> },
    #[error("batch references night {0} outside the pretrain split")]
    SplitLeak(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dash(#[from] DashError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub batch_size: usize,
    /// Content tokens per segment; `[CLS]` is added on top.
    pub seq_tokens: usize,
    /// Segments drawn from each selected night; values above 1 create pseudo-negatives.
    pub segments_per_night: usize,
    pub mask_rate: f64,
    /// Modalities the run may use; empty means every modality in the corpus.
    pub modalities: Vec<Modality>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            seq_tokens: 20,
            segments_per_night: 1,
            mask_rate: 0.15,
            modalities: Vec::new(),
        }
    }
}

/// Full run configuration, read from TOML with `[model]`, `[dash]`,
/// `[optimizer]` and `[data]` sections. `optimizer.total_steps` is the step count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub seed: u64,
    pub objective: Objective,
    pub model: ModelConfig,
    pub dash: DashConfig,
    pub optimizer: AdamWConfig,
    pub data: DataConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Preset dimensions written out explicitly so config files can edit them.
fn explicit(p: SizePreset) -> ModelConfig {
    ModelConfig {
        size_preset: None,
        ..ModelConfig::preset(p)
    }
}

impl PretrainConfig {
    /// Laptop-scale reference run: B=32, D=64, 2 layers, 20 tokens, 2000 steps.
    pub fn desk() -> Self {
        Self {
            seed: 7,
            objective: Objective::Dash,
            model: explicit(SizePreset::Desk),
            dash: DashConfig::default(),
            optimizer: AdamWConfig {
                peak_lr: 1e-3,
                ..AdamWConfig::paper_pretrain(2000)
            },
            data: DataConfig::default(),
        }
    }

    /// Published large-scale settings: batch 320, 120 content tokens, small preset.
    pub fn paper() -> Self {
        Self {
            model: explicit(SizePreset::Small),
            optimizer: AdamWConfig::paper_pretrain(100_000),
            data: DataConfig {
                batch_size: 320,
                seq_tokens: 120,
                ..DataConfig::default()
            },
            ..Self::desk()
        }
    }

    pub fn steps(&self) -> u64 {
        self.optimizer.total_steps
    }

    pub fn validate(&self) -> Result<(), PretrainError> {
        let bad = |m: String| Err(PretrainError::InvalidConfig(m));
        let d = &self.data;
        if d.seq_tokens == 0 || d.seq_tokens + 1 > MAX_SEQ {
            return bad(format!("seq_tokens {} must be in 1..={}", d.seq_tokens, MAX_SEQ - 1));
        }
        if d.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if d.segments_per_night == 0 || d.segments_per_night > d.batch_size {
            return bad(format!("segments_per_night {} outside 1..=batch_size", d.segments_per_night));
        }
        if !(0.0..1.0).contains(&d.mask_rate) {
            return bad(format!("mask_rate {} outside [0, 1)", d.mask_rate));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.warmup_fraction) || o.total_steps == 0 || o.peak_lr < 0.0 {
            return bad("optimizer needs total_steps > 0, peak_lr >= 0 and warmup_fraction in [0, 1)".into());
        }
        self.model.clone().resolved().validate()?;
        self.dash.validate()?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, PretrainError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PretrainError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Allowed modalities intersected with what `corpus` provides.
    pub fn usable_modalities(&self, corpus: &Corpus) -> Vec<Modality> {
        corpus
            .modalities()
            .into_iter()
            .filter(|m| self.data.modalities.is_empty() || self.data.modalities.contains(m))
            .collect()
    }
}

/// One segment: `seq_tokens` consecutive epochs of a night.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentRef {
    /// Index into the corpus.
    pub night: usize,
    pub night_id: String,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub pair: (Modality, Modality),
    pub segments: Vec<SegmentRef>,
}

impl BatchPlan {
    pub fn pair_label(&self) -> String {
        format!("{}-{}", self.pair.0, self.pair.1)
    }
}

/// Unordered modality pairs with the number of eligible pretrain nights carrying both.
pub fn pair_availability(corpus: &Corpus, cfg: &PretrainConfig) -> Vec<((Modality, Modality), usize)> {
    let allowed = cfg.usable_modalities(corpus);
    let nights: Vec<usize> = eligible_nights(corpus, cfg);
    let mut out = Vec::new();
    for (i, &a) in allowed.iter().enumerate() {
        for &b in &allowed[i + 1..] {
            let n = nights
                .iter()
                .filter(|&&k| corpus.nights[k].has(a) && corpus.nights[k].has(b))
                .count();
            if n > 0 {
                out.push(((a, b), n));
            }
        }
    }
    out
}

fn eligible_nights(corpus: &Corpus, cfg: &PretrainConfig) -> Vec<usize> {
    corpus
        .indices(Split::Pretrain)
        .into_iter()
        .filter(|&i| corpus.nights[i].n_epochs() >= cfg.data.seq_tokens)
        .collect()
}

/// Draw the modality pair and segments of one batch.
///
/// The pair is chosen with probability proportional to the number of nights
/// carrying both modalities. Nights are drawn without replacement while enough
/// remain, then the pool is reshuffled; each contributes `segments_per_night`
/// segments at uniform offsets.
pub fn sample_batch(corpus: &Corpus, cfg: &PretrainConfig, rng: &mut impl Rng) -> Result<BatchPlan, PretrainError> {
    let avail = pair_availability(corpus, cfg);
    let total: usize = avail.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(PretrainError::NoPairableData(cfg.data.seq_tokens));
    }
    let mut pick = rng.random_range(0..total);
    let mut pair = avail[0].0;
    for &(p, n) in &avail {
        if pick < n {
            pair = p;
            break;
        }
        pick -= n;
    }
    let pool: Vec<usize> = eligible_nights(corpus, cfg)
        .into_iter()
        .filter(|&k| corpus.nights[k].has(pair.0) && corpus.nights[k].has(pair.1))
        .collect();
    let per = cfg.data.segments_per_night;
    let b = cfg.data.batch_size;
    let needed = b.div_ceil(per);
    let mut chosen = Vec::with_capacity(needed);
    while chosen.len() < needed {
        let mut round = pool.clone();
        round.shuffle(rng);
        chosen.extend(round.into_iter().take(needed - chosen.len()));
    }
    let mut segments = Vec::with_capacity(b);
    for k in chosen {
        let night = &corpus.nights[k];
        let span = night.n_epochs() - cfg.data.seq_tokens + 1;
        for _ in 0..per {
            if segments.len() == b {
                break;
            }
            segments.push(SegmentRef {
                night: k,
                night_id: night.meta.night_id.clone(),
                offset: rng.random_range(0..span),
            });
        }
    }
    Ok(BatchPlan { pair, segments })
}

/// Stream that drives the batch of `step`.
pub fn batch_rng(seed: u64, step: u64) -> rand_chacha::ChaCha8Rng {
    stream(seed, &[tag("batch"), step])
}

/// Seed of the mask for `view` (0 or 1) at `step`; the two views never share a stream.
pub fn mask_seed(seed: u64, step: u64, view: u64) -> u64 {
    derive_seed(seed, &[tag("mask"), step, view])
}

fn dropout_seed(seed: u64, step: u64, view: u64) -> u64 {
    derive_seed(seed, &[tag("dropout"), step, view])
}

/// `[B, L, width]` values of modality `m` for the planned segments.
pub fn gather(corpus: &Corpus, plan: &BatchPlan, m: Modality, seq: usize) -> Tensor {
    let width = m.token_width();
    let mut data = Vec::with_capacity(plan.segments.len() * seq * width);
    for s in &plan.segments {
        data.extend(corpus.nights[s.night].epochs[&m].rows_f64(s.offset, seq));
    }
    Tensor::new(&[plan.segments.len(), seq, width], data).expect("segment shape")
}

/// Metadata per segment; segments of one night share its `night_id`.
fn batch_metas(corpus: &Corpus, plan: &BatchPlan) -> Vec<SubjectMeta> {
    plan.segments.iter().map(|s| corpus.nights[s.night].meta.clone()).collect()
}

/// Loss, as logged, of one optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub pair: String,
    pub loss: f64,
    pub lr: f64,
}

/// Loss of one pass without an optimizer update, on the logged scale.
///
/// DASH normalizes its weights per row, which shifts the loss by about `-ln B`
/// relative to InfoNCE; the logged value adds `ln B` back so both objectives
/// share one scale. Gradients are unaffected.
pub fn forward_loss<'g>(
    g: &'g Graph,
    model: &AlignmentModel,
    corpus: &Corpus,
    plan: &BatchPlan,
    cfg: &PretrainConfig,
    step: u64,
    train: bool,
) -> Result<crate::autodiff::Var<'g>, PretrainError> {
    for s in &plan.segments {
        if corpus.splits[s.night] != Split::Pretrain {
            return Err(PretrainError::SplitLeak(s.night_id.clone()));
        }
    }
    let seq = cfg.data.seq_tokens;
    let mut views = Vec::with_capacity(2);
    let mut anchor_mask = None;
    for (view, m) in [(0u64, plan.pair.0), (1, plan.pair.1)] {
        let st = train.then(|| Stochastic {
            seed: dropout_seed(cfg.seed, step, view),
        });
        let x = g.constant(gather(corpus, plan, m, seq));
        let tokens = model.tokenize(g, m, x, st)?;
        let (tokens, mask) = model.apply_mask(g, tokens, m, cfg.data.mask_rate, mask_seed(cfg.seed, step, view))?;
        if view == 0 {
            anchor_mask = Some(mask);
        }
        views.push(model.encode(g, tokens, st)?.aligned);
    }
    let metas = batch_metas(corpus, plan);
    let pi: Vec<usize> = (0..plan.segments.len()).collect();
    let loss = contrastive_loss(
        views[0],
        views[1],
        &metas,
        &pi,
        anchor_mask.as_deref(),
        &cfg.dash,
        cfg.objective,
    )?;
    Ok(loss)
}

fn logged_scale(cfg: &PretrainConfig, raw: f64, b: usize) -> f64 {
    match cfg.objective {
        Objective::Dash => raw + (b as f64).ln(),
        Objective::InfoNce => raw,
    }
}

/// Forward, backward and one AdamW update; returns the logged loss and lr.
pub fn train_step(
    model: &mut AlignmentModel,
    opt: &mut OptimizerState,
    corpus: &Corpus,
    plan: &BatchPlan,
    cfg: &PretrainConfig,
    step: u64,
) -> Result<StepRecord, PretrainError> {
    let g = Graph::with_finite_check(false);
    let loss = forward_loss(&g, model, corpus, plan, cfg, step, true)?;
    let raw = loss.value().data()[0];
    if !raw.is_finite() {
        return Err(PretrainError::NonFiniteLoss {
            step,
            pair: plan.pair_label(),
            nights: plan.segments.iter().map(|s| s.night_id.clone()).collect(),
        });
    }
    let grads = g.backward(loss)?;
    model.params.zero_grads();
    g.accumulate_into(&grads, &mut model.params);
    let ids = g.bound_params(&model.params);
    let lr = adamw_step(&mut model.params, &ids, opt)?;
    Ok(StepRecord {
        step,
        pair: plan.pair_label(),
        loss: logged_scale(cfg, raw, plan.segments.len()),
        lr,
    })
}

/// Model, optimizer and step counter of a run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: PretrainConfig,
    pub model: AlignmentModel,
    pub opt: OptimizerState,
    pub step: u64,
}

impl Trainer {
    /// Fresh model over the corpus modalities the config allows.
    pub fn new(config: PretrainConfig, corpus: &Corpus) -> Result<Self, PretrainError> {
        config.validate()?;
        let mods = config.usable_modalities(corpus);
        let model = AlignmentModel::new(config.model.clone(), &mods, config.seed)?;
        let opt = OptimizerState::new(config.optimizer.clone());
        Ok(Self {
            config,
            model,
            opt,
            step: 0,
        })
    }

    /// Continue from `ck` under `config`.
    ///
    /// Parameters and optimizer moments come from the checkpoint; modalities
    /// allowed by `config` but absent from it get fresh tokenizers and mask
    /// tokens. The schedule follows `config.optimizer`.
    pub fn resume(config: PretrainConfig, ck: &Checkpoint, corpus: &Corpus) -> Result<Self, PretrainError> {
        config.validate()?;
        let mut mods = config.usable_modalities(corpus);
        for name in ck.params.iter().map(|(n, _)| n) {
            if let Some(m) = name.strip_prefix("mask.").and_then(|m| m.parse::<Modality>().ok()) {
                if !mods.contains(&m) {
                    mods.push(m);
                }
            }
        }
        mods.sort();
        let mut model = AlignmentModel::new(config.model.clone(), &mods, ck.rng.seed)?;
        let fresh = ck.restore_into(&mut model.params)?;
        if !fresh.is_empty() {
            log::info!("initialized {} new parameters: {:?}", fresh.len(), fresh);
        }
        let mut opt = ck.optimizer.clone().unwrap_or_else(|| OptimizerState::new(config.optimizer.clone()));
        opt.config = config.optimizer.clone();
        Ok(Self {
            config,
            model,
            opt,
            step: ck.rng.step,
        })
    }

    pub fn load(config: PretrainConfig, path: &Path, corpus: &Corpus) -> Result<Self, PretrainError> {
        Self::resume(config, &Checkpoint::load(path)?, corpus)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(
            &self.model.params,
            Some(self.opt.clone()),
            RngState {
                seed: self.config.seed,
                step: self.step,
            },
            self.config.to_toml(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<(), PretrainError> {
        Ok(self.checkpoint().save(path)?)
    }

    /// Plan of the next step; a pure function of seed and step.
    pub fn next_plan(&self, corpus: &Corpus) -> Result<BatchPlan, PretrainError> {
        sample_batch(corpus, &self.config, &mut batch_rng(self.config.seed, self.step))
    }

    pub fn step_once(&mut self, corpus: &Corpus) -> Result<StepRecord, PretrainError> {
        let plan = self.next_plan(corpus)?;
        let rec = train_step(&mut self.model, &mut self.opt, corpus, &plan, &self.config, self.step)?;
        self.step += 1;
        Ok(rec)
    }

    /// Run until `config.steps()` (or `limit` more steps), appending CSV lines
    /// `step,pair,loss,lr` to `metrics`.
    pub fn run(
        &mut self,
        corpus: &Corpus,
        limit: Option<u64>,
        mut metrics: Option<&mut dyn Write>,
    ) -> Result<Vec<StepRecord>, PretrainError> {
        let end = match limit {
            Some(n) => (self.step + n).min(self.config.steps()),
            None => self.config.steps(),
        };
        let mut trace = Vec::new();
        while self.step < end {
            let rec = self.step_once(corpus)?;
            if rec.step % 100 == 0 {
                log::info!("step {} {} loss {:.4} lr {:.2e}", rec.step, rec.pair, rec.loss, rec.lr);
            }
            if let Some(w) = metrics.as_deref_mut() {
                writeln!(w, "{},{},{},{}", rec.step, rec.pair, rec.loss, rec.lr)?;
            }
            trace.push(rec);
        }
        Ok(trace)
    }
}

pub const METRICS_HEADER: &str = "step,pair,loss,lr";

/// Empirical pair frequencies of `n` plans drawn from consecutive steps.
pub fn pair_frequencies(corpus: &Corpus, cfg: &PretrainConfig, n: u64) -> Result<BTreeMap<String, usize>, PretrainError> {
    let mut out = BTreeMap::new();
    for step in 0..n {
        let plan = sample_batch(corpus, cfg, &mut batch_rng(cfg.seed, step))?;
        *out.entry(plan.pair_label()).or_insert(0) += 1;
    }
    Ok(out)
}

/// Encoder and run config stored in a checkpoint.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<(AlignmentModel, PretrainConfig), PretrainError> {
    let cfg = PretrainConfig::from_toml(&ck.config)?;
    let mods: Vec<Modality> = ck
        .params
        .iter()
        .filter_map(|(n, _)| n.strip_prefix("mask.").and_then(|m| m.parse().ok()))
        .collect();
    let mut model = AlignmentModel::new(cfg.model.clone(), &mods, ck.rng.seed)?;
    let missing = ck.restore_into(&mut model.params)?;
    if !missing.is_empty() {
        return Err(PretrainError::Checkpoint(CheckpointError::Corrupt(format!(
            "checkpoint lacks parameters {missing:?}"
        ))));
    }
    Ok((model, cfg))
}
