//! Cross-modal segment retrieval.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::autodiff::Tensor;
use crate::corpus::{Corpus, Split};
use crate::model::AlignmentModel;
use crate::modality::Modality;
use crate::rng::{stream, tag};

/// Fraction of queries whose most cosine-similar candidate is their own row.
///
/// Ties go to the lowest candidate index. Zero rows have similarity 0 to everything.
pub fn recall_at_1(queries: &Tensor, candidates: &Tensor) -> Result<f64, EvalError> {
    let n = queries.shape()[0];
    if n == 0 {
        return Err(EvalError::EmptyPool);
    }
    if candidates.shape() != queries.shape() || queries.rank() != 2 {
        return Err(EvalError::Shape(format!("{:?} vs {:?}", queries.shape(), candidates.shape())));
    }
    let d = queries.shape()[1];
    let unit = |t: &Tensor| -> Vec<Vec<f64>> {
        t.data()
            .chunks(d)
            .map(|r| {
                let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.iter().map(|v| if norm > 0.0 { v / norm } else { 0.0 }).collect()
            })
            .collect()
    };
    let q = unit(queries);
    let c = unit(candidates);
    let hits = q
        .iter()
        .enumerate()
        .filter(|(i, qi)| {
            let mut best = 0;
            let mut best_s = f64::NEG_INFINITY;
            for (j, cj) in c.iter().enumerate() {
                let s: f64 = qi.iter().zip(cj).map(|(a, b)| a * b).sum();
                if s > best_s {
                    best_s = s;
                    best = j;
                }
            }
            best == *i
        })
        .count();
    Ok(hits as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub modalities: Vec<Modality>,
    /// `recall[q][c]`: queries from modality `q`, candidates from `c`.
    pub recall: Vec<Vec<f64>>,
    /// Mean over ordered pairs of distinct modalities.
    pub mean: f64,
    pub pool_size: usize,
}

impl RetrievalReport {
    pub fn get(&self, q: Modality, c: Modality) -> Option<f64> {
        let i = self.modalities.iter().position(|&m| m == q)?;
        let j = self.modalities.iter().position(|&m| m == c)?;
        Some(self.recall[i][j])
    }

    pub fn to_csv(&self) -> String {
        let names: Vec<&str> = self.modalities.iter().map(|m| m.name()).collect();
        let mut s = format!("query\\candidate,{}\n", names.join(","));
        for (name, row) in names.iter().zip(&self.recall) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            s.push_str(&format!("{name},{}\n", cells.join(",")));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub pool_size: usize,
    pub seq_tokens: usize,
    pub split: Split,
    /// Empty means every modality shared by model and corpus.
    pub modalities: Vec<Modality>,
    pub seed: u64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            pool_size: 64,
            seq_tokens: 20,
            split: Split::Test,
            modalities: Vec::new(),
            seed: 7,
        }
    }
}

/// Segment `(night, offset)` pool over nights carrying every listed modality.
///
/// Distinct nights are used first; extra segments reuse nights at new offsets.
fn segment_pool(corpus: &Corpus, mods: &[Modality], cfg: &RetrievalConfig) -> Vec<(usize, usize)> {
    let nights: Vec<usize> = corpus
        .indices(cfg.split)
        .into_iter()
        .filter(|&i| {
            let n = &corpus.nights[i];
            n.n_epochs() >= cfg.seq_tokens && mods.iter().all(|&m| n.has(m))
        })
        .collect();
    if nights.is_empty() {
        return Vec::new();
    }
    let mut rng = stream(cfg.seed, &[tag("retrieval")]);
    let mut order = nights.clone();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let mut pool = Vec::with_capacity(cfg.pool_size);
    let mut seen = std::collections::HashSet::new();
    let mut attempts = 0;
    while pool.len() < cfg.pool_size && attempts < 100 * cfg.pool_size {
        let night = order[attempts % order.len()];
        attempts += 1;
        let span = corpus.nights[night].n_epochs() - cfg.seq_tokens + 1;
        let offset = rng.random_range(0..span);
        if seen.insert((night, offset)) {
            pool.push((night, offset));
        }
    }
    pool
}

/// Time-mean aligned embeddings `[N, align_dim]` of `pool` for modality `m`.
pub fn embed_segments(
    model: &AlignmentModel,
    corpus: &Corpus,
    m: Modality,
    pool: &[(usize, usize)],
    seq: usize,
) -> Result<Tensor, EvalError> {
    const CHUNK: usize = 16;
    let width = m.token_width();
    let a = model.config.align_dim;
    let mut out = Vec::with_capacity(pool.len() * a);
    for chunk in pool.chunks(CHUNK) {
        let mut data = Vec::with_capacity(chunk.len() * seq * width);
        for &(night, offset) in chunk {
            data.extend(corpus.nights[night].epochs[&m].rows_f64(offset, seq));
        }
        let x = Tensor::new(&[chunk.len(), seq, width], data)?;
        let enc = model.encode_values(m, &x)?;
        for seg in enc.aligned.data().chunks(seq * a) {
            for k in 0..a {
                out.push((0..seq).map(|t| seg[t * a + k]).sum::<f64>() / seq as f64);
            }
        }
    }
    Ok(Tensor::new(&[pool.len(), a], out)?)
}

#[cfg(feature = "parallel")]
fn embed_all(
    model: &AlignmentModel,
    corpus: &Corpus,
    mods: &[Modality],
    pool: &[(usize, usize)],
    seq: usize,
) -> Result<Vec<Tensor>, EvalError> {
    use rayon::prelude::*;
    mods.par_iter().map(|&m| embed_segments(model, corpus, m, pool, seq)).collect()
}

#[cfg(not(feature = "parallel"))]
fn embed_all(
    model: &AlignmentModel,
    corpus: &Corpus,
    mods: &[Modality],
    pool: &[(usize, usize)],
    seq: usize,
) -> Result<Vec<Tensor>, EvalError> {
    mods.iter().map(|&m| embed_segments(model, corpus, m, pool, seq)).collect()
}

/// Recall@1 for every ordered modality pair over a shared segment pool.
pub fn retrieval_matrix(model: &AlignmentModel, corpus: &Corpus, cfg: &RetrievalConfig) -> Result<RetrievalReport, EvalError> {
    let available = corpus.modalities();
    let mods: Vec<Modality> = if cfg.modalities.is_empty() {
        model.modalities().into_iter().filter(|m| available.contains(m)).collect()
    } else {
        for m in &cfg.modalities {
            if !available.contains(m) || !model.has_modality(*m) {
                return Err(EvalError::UnknownModality(*m));
            }
        }
        cfg.modalities.clone()
    };
    if mods.len() < 2 {
        return Err(EvalError::InsufficientModalities(mods.len()));
    }
    let pool = segment_pool(corpus, &mods, cfg);
    if pool.is_empty() {
        return Err(EvalError::EmptyPool);
    }
    let emb: BTreeMap<Modality, Tensor> = mods
        .iter()
        .copied()
        .zip(embed_all(model, corpus, &mods, &pool, cfg.seq_tokens)?)
        .collect();
    let m = mods.len();
    let mut recall = vec![vec![0.0; m]; m];
    let mut sum = 0.0;
    for (i, a) in mods.iter().enumerate() {
        for (j, b) in mods.iter().enumerate() {
            recall[i][j] = recall_at_1(&emb[a], &emb[b])?;
            if i != j {
                sum += recall[i][j];
            }
        }
    }
    Ok(RetrievalReport {
        modalities: mods,
        recall,
        mean: sum / (m * (m - 1)) as f64,
        pool_size: pool.len(),
    })
}
