//! Supervised heads on top of a (pre-trained or random) encoder: per-epoch
//! sleep staging with LoRA adapters, and night-level probes on `[CLS]`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::metrics::{metrics, roc_auc, ConfusionMatrix, Metrics};
use super::EvalError;
use crate::autodiff::{adamw_step, AdamWConfig, Graph, OptimizerState, Tensor, Var};
use crate::corpus::{Corpus, Split};
use crate::model::{AlignmentModel, ClassifierHead, FusionMode, LoraConfig, Stochastic, MAX_SEQ};
use crate::modality::Modality;
use crate::rng::{derive_seed, stream, tag};

pub const STAGE_LABELS: [&str; 5] = ["W", "N1", "N2", "N3", "REM"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub lora: LoraConfig,
    /// Empty means every modality shared by model and corpus.
    pub modalities: Vec<Modality>,
    pub fusion: FusionMode,
    pub optimizer: AdamWConfig,
    /// Nights (or night chunks) per optimizer step.
    pub nights_per_step: usize,
    /// Longest chunk fed to the encoder; longer nights are split evenly.
    pub max_tokens: usize,
    pub train_split: Split,
    pub eval_split: Split,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl FinetuneConfig {
    /// Desk-scale schedule: 300 steps at lr 1e-3.
    pub fn desk() -> Self {
        Self {
            optimizer: AdamWConfig {
                peak_lr: 1e-3,
                ..AdamWConfig::finetune(300)
            },
            ..Self::paper()
        }
    }

    /// Published settings: lr 1e-4, weight decay 1e-5, whole-night segments.
    pub fn paper() -> Self {
        Self {
            lora: LoraConfig::default(),
            modalities: Vec::new(),
            fusion: FusionMode::Gating,
            optimizer: AdamWConfig::finetune(1000),
            nights_per_step: 4,
            max_tokens: MAX_SEQ - 1,
            train_split: Split::Finetune,
            eval_split: Split::Test,
            seed: 7,
        }
    }
}

/// Outcome of a supervised run on the evaluation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisedReport {
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
    /// Set for binary targets.
    pub auc: Option<f64>,
    /// Training loss per step.
    pub losses: Vec<f64>,
    /// Non-LoRA parameter hash before and after training.
    pub base_fingerprint: (String, String),
}

fn resolve_modalities(model: &AlignmentModel, corpus: &Corpus, wanted: &[Modality]) -> Result<Vec<Modality>, EvalError> {
    let available = corpus.modalities();
    if wanted.is_empty() {
        let mods: Vec<Modality> = model.modalities().into_iter().filter(|m| available.contains(m)).collect();
        if mods.is_empty() {
            return Err(EvalError::InsufficientModalities(0));
        }
        return Ok(mods);
    }
    for &m in wanted {
        if !available.contains(&m) || !model.has_modality(m) {
            return Err(EvalError::UnknownModality(m));
        }
    }
    Ok(wanted.to_vec())
}

/// `[start, end)` epoch ranges of at most `max` tokens covering `n` epochs evenly.
pub fn chunk_ranges(n: usize, max: usize) -> Vec<(usize, usize)> {
    let k = n.div_ceil(max).max(1);
    (0..k).map(|i| (i * n / k, (i + 1) * n / k)).collect()
}

/// A labelled stretch of one night.
#[derive(Debug, Clone)]
struct Chunk {
    night: usize,
    start: usize,
    end: usize,
}

fn staging_chunks(corpus: &Corpus, split: Split, mods: &[Modality], max: usize) -> Vec<Chunk> {
    let mut out = Vec::new();
    for i in corpus.indices(split) {
        let night = &corpus.nights[i];
        let Some(labels) = corpus.labels_of(i) else { continue };
        if labels.stages.len() != night.n_epochs() || !mods.iter().all(|&m| night.has(m)) {
            continue;
        }
        for (start, end) in chunk_ranges(night.n_epochs(), max) {
            out.push(Chunk { night: i, start, end });
        }
    }
    out
}

fn chunk_input(corpus: &Corpus, c: &Chunk, m: Modality) -> Tensor {
    let len = c.end - c.start;
    let data = corpus.nights[c.night].epochs[&m].rows_f64(c.start, len);
    Tensor::new(&[1, len, m.token_width()], data).expect("chunk shape")
}

/// Per-epoch logits `[L, 5]` of one chunk: unmasked encoder states of every
/// modality, fused, then the head. The projection head is not used.
fn staging_logits<'g>(
    g: &'g Graph,
    model: &AlignmentModel,
    head: &ClassifierHead,
    corpus: &Corpus,
    c: &Chunk,
    mods: &[Modality],
    st: Option<Stochastic>,
) -> Result<Var<'g>, EvalError> {
    let mut feats = Vec::with_capacity(mods.len());
    for &m in mods {
        let x = g.constant(chunk_input(corpus, c, m));
        let tokens = model.tokenize(g, m, x, st)?;
        feats.push((m, model.encode(g, tokens, st)?.hidden));
    }
    let logits = head.forward(g, &feats)?;
    Ok(logits.reshape(&[c.end - c.start, head.classes])?)
}

/// Mean cross-entropy of `[N, K]` logits against `targets`; entries `>= K` are skipped.
fn cross_entropy<'g>(g: &'g Graph, logits: Var<'g>, targets: &[u8]) -> Result<Option<Var<'g>>, EvalError> {
    let k = logits.shape()[1];
    let mut onehot = vec![0.0; targets.len() * k];
    let mut weight = vec![0.0; targets.len()];
    let mut n = 0usize;
    for (i, &t) in targets.iter().enumerate() {
        if (t as usize) < k {
            onehot[i * k + t as usize] = 1.0;
            weight[i] = 1.0;
            n += 1;
        }
    }
    if n == 0 {
        return Ok(None);
    }
    let picked = logits.mul(g.constant(Tensor::new(&[targets.len(), k], onehot)?))?.sum_axis(1)?;
    let per = logits.logsumexp()?.sub(picked)?;
    let loss = per.mul(g.constant(Tensor::from_vec(weight)))?.sum()?.scale(1.0 / n as f64)?;
    Ok(Some(loss))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fine-tune LoRA adapters plus a per-epoch 5-class head on a copy of `model`
/// and score the evaluation split.
///
/// Base weights stay frozen; masking and the projection head are not used.
/// Epochs whose stage label is 5 or more are treated as unscored.
pub fn staging_finetune(model: &AlignmentModel, corpus: &Corpus, cfg: &FinetuneConfig) -> Result<SupervisedReport, EvalError> {
    let mods = resolve_modalities(model, corpus, &cfg.modalities)?;
    let max = cfg.max_tokens.clamp(1, MAX_SEQ - 1);
    let train = staging_chunks(corpus, cfg.train_split, &mods, max);
    let test = staging_chunks(corpus, cfg.eval_split, &mods, max);
    if train.is_empty() || test.is_empty() {
        return Err(EvalError::NoLabels("no staged nights in the train or evaluation split".into()));
    }
    let mut model = model.clone();
    let before = model.base_fingerprint();
    model.attach_lora(cfg.lora.clone())?;
    let mut head = ClassifierHead::new(model.config.hidden_dim, 5, &mods, cfg.fusion, derive_seed(cfg.seed, &[tag("stage-head")]));
    let mut opt_model = OptimizerState::new(cfg.optimizer.clone());
    let mut opt_head = OptimizerState::new(cfg.optimizer.clone());
    let mut order_rng = stream(cfg.seed, &[tag("stage-order")]);
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.optimizer.total_steps as usize);
    for step in 0..cfg.optimizer.total_steps {
        let g = Graph::with_finite_check(false);
        let mut total: Option<Var<'_>> = None;
        let mut parts = 0;
        for slot in 0..cfg.nights_per_step.max(1) {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order.shuffle(&mut order_rng);
            }
            let c = &train[order.pop().unwrap()];
            let st = Some(Stochastic {
                seed: derive_seed(cfg.seed, &[tag("stage-dropout"), step, slot as u64]),
            });
            let logits = staging_logits(&g, &model, &head, corpus, c, &mods, st)?;
            let targets = &corpus.labels_of(c.night).unwrap().stages[c.start..c.end];
            if let Some(l) = cross_entropy(&g, logits, targets)? {
                total = Some(match total {
                    Some(t) => t.add(l)?,
                    None => l,
                });
                parts += 1;
            }
        }
        let Some(total) = total else { continue };
        let loss = total.scale(1.0 / parts as f64)?;
        losses.push(loss.value().data()[0]);
        let grads = g.backward(loss)?;
        model.params.zero_grads();
        head.params.zero_grads();
        g.accumulate_into(&grads, &mut model.params);
        g.accumulate_into(&grads, &mut head.params);
        let ids = g.bound_params(&model.params);
        adamw_step(&mut model.params, &ids, &mut opt_model)?;
        let ids = g.bound_params(&head.params);
        adamw_step(&mut head.params, &ids, &mut opt_head)?;
    }
    let after = model.base_fingerprint();
    let mut cm = ConfusionMatrix::new(STAGE_LABELS.iter().map(|s| s.to_string()).collect());
    for c in &test {
        let g = Graph::with_finite_check(false);
        let logits = staging_logits(&g, &model, &head, corpus, c, &mods, None)?.value();
        let targets = &corpus.labels_of(c.night).unwrap().stages[c.start..c.end];
        for (row, &t) in logits.data().chunks(5).zip(targets) {
            if (t as usize) < 5 {
                cm.add(t as usize, argmax(row));
            }
        }
    }
    Ok(SupervisedReport {
        metrics: metrics(&cm)?,
        confusion: cm,
        auc: None,
        losses,
        base_fingerprint: (before, after),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub modalities: Vec<Modality>,
    pub fusion: FusionMode,
    pub optimizer: AdamWConfig,
    pub max_tokens: usize,
    pub train_split: Split,
    pub eval_split: Split,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            modalities: Vec::new(),
            fusion: FusionMode::Gating,
            optimizer: AdamWConfig {
                peak_lr: 3e-3,
                ..AdamWConfig::finetune(300)
            },
            max_tokens: MAX_SEQ - 1,
            train_split: Split::Finetune,
            eval_split: Split::Test,
            seed: 7,
        }
    }
}

/// `[CLS]` of a whole night per modality, averaged over chunks when the night
/// exceeds `max` tokens.
pub fn night_cls(model: &AlignmentModel, corpus: &Corpus, night: usize, m: Modality, max: usize) -> Result<Vec<f64>, EvalError> {
    let n = corpus.nights[night].n_epochs();
    let ranges = chunk_ranges(n, max);
    let d = model.config.hidden_dim;
    let mut acc = vec![0.0; d];
    for &(start, end) in &ranges {
        let c = Chunk { night, start, end };
        let out = model.encode_values(m, &chunk_input(corpus, &c, m))?;
        for (a, v) in acc.iter_mut().zip(out.cls.data()) {
            *a += v / ranges.len() as f64;
        }
    }
    Ok(acc)
}

/// Night-level probe with targets from the labels sidecar.
pub fn aggregate_probe(model: &AlignmentModel, corpus: &Corpus, cfg: &ProbeConfig) -> Result<SupervisedReport, EvalError> {
    let targets: BTreeMap<String, u8> = corpus
        .labels
        .iter()
        .filter_map(|(id, l)| l.target.map(|t| (id.clone(), t)))
        .collect();
    aggregate_probe_with(model, corpus, &targets, cfg)
}

/// Frozen encoder, fused `[CLS]` features and a two-layer head trained on
/// `targets` (night id → class). Binary targets also report ROC-AUC.
pub fn aggregate_probe_with(
    model: &AlignmentModel,
    corpus: &Corpus,
    targets: &BTreeMap<String, u8>,
    cfg: &ProbeConfig,
) -> Result<SupervisedReport, EvalError> {
    let mods = resolve_modalities(model, corpus, &cfg.modalities)?;
    let max = cfg.max_tokens.clamp(1, MAX_SEQ - 1);
    let pick = |split: Split| -> Vec<(usize, u8)> {
        corpus
            .indices(split)
            .into_iter()
            .filter(|&i| mods.iter().all(|&m| corpus.nights[i].has(m)))
            .filter_map(|i| targets.get(&corpus.nights[i].meta.night_id).map(|&t| (i, t)))
            .collect()
    };
    let train = pick(cfg.train_split);
    let test = pick(cfg.eval_split);
    let classes = train.iter().chain(&test).map(|&(_, t)| t as usize + 1).max().unwrap_or(0);
    let distinct: std::collections::BTreeSet<u8> = train.iter().map(|&(_, t)| t).collect();
    if distinct.len() < 2 || test.is_empty() {
        return Err(EvalError::NoLabels("probe needs at least two classes and a non-empty evaluation split".into()));
    }
    let before = model.base_fingerprint();
    let d = model.config.hidden_dim;
    let features = |set: &[(usize, u8)]| -> Result<BTreeMap<Modality, Tensor>, EvalError> {
        let mut out = BTreeMap::new();
        for &m in &mods {
            let mut data = Vec::with_capacity(set.len() * d);
            for &(i, _) in set {
                data.extend(night_cls(model, corpus, i, m, max)?);
            }
            out.insert(m, Tensor::new(&[set.len(), d], data)?);
        }
        Ok(out)
    };
    let train_x = features(&train)?;
    let test_x = features(&test)?;
    let train_y: Vec<u8> = train.iter().map(|&(_, t)| t).collect();
    let mut head = ClassifierHead::new(d, classes, &mods, cfg.fusion, derive_seed(cfg.seed, &[tag("probe-head")]));
    let mut opt = OptimizerState::new(cfg.optimizer.clone());
    let mut losses = Vec::new();
    for _ in 0..cfg.optimizer.total_steps {
        let g = Graph::with_finite_check(false);
        let feats: Vec<(Modality, Var<'_>)> = mods.iter().map(|&m| (m, g.constant(train_x[&m].clone()))).collect();
        let logits = head.forward(&g, &feats)?;
        let loss = cross_entropy(&g, logits, &train_y)?.expect("labelled training set");
        losses.push(loss.value().data()[0]);
        let grads = g.backward(loss)?;
        head.params.zero_grads();
        g.accumulate_into(&grads, &mut head.params);
        let ids = g.bound_params(&head.params);
        adamw_step(&mut head.params, &ids, &mut opt)?;
    }
    let g = Graph::with_finite_check(false);
    let feats: Vec<(Modality, Var<'_>)> = mods.iter().map(|&m| (m, g.constant(test_x[&m].clone()))).collect();
    let logits = head.forward(&g, &feats)?.value();
    let mut cm = ConfusionMatrix::with_classes(classes.max(2));
    let mut scores = Vec::with_capacity(test.len());
    for (row, &(_, t)) in logits.data().chunks(classes).zip(&test) {
        cm.add(t as usize, argmax(row));
        if classes == 2 {
            scores.push(row[1] - row[0]);
        }
    }
    let auc = if classes == 2 {
        let positive: Vec<bool> = test.iter().map(|&(_, t)| t == 1).collect();
        roc_auc(&scores, &positive).ok()
    } else {
        None
    };
    Ok(SupervisedReport {
        metrics: metrics(&cm)?,
        confusion: cm,
        auc,
        losses,
        base_fingerprint: (before, model.base_fingerprint()),
    })
}
