//! WebAssembly bindings behind `www/index.html`.
//!
//! Every export takes plain numbers or strings and returns JSON, so the page
//! needs no bundler. The same views are plain Rust functions for native tests.

use psgalign::autodiff::Tensor;
use psgalign::dash::{base_infonce, compute_weights, dash_loss_directional, identity_pairing, similarity, DashConfig};
use psgalign::model::{rotary_score, ROPE_BASE};
use psgalign::modality::Modality;
use psgalign::prep::{derive_ibi, detect_rpeaks, IbiConfig};
use psgalign::rng::stream;
use psgalign::{Gender, SubjectMeta};
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const EMB_DIM: usize = 16;

#[derive(Debug, Serialize)]
pub struct WeightsView {
    pub omega: Vec<Vec<f64>>,
    pub pseudo: Vec<Vec<bool>>,
    /// Cosine similarity of every anchor to every candidate.
    pub sim: Vec<Vec<f64>>,
    pub infonce: f64,
    pub dash: f64,
    pub ln_b: f64,
}

/// Parse `age,gender,site,night` lines; age and site may be blank.
pub fn parse_subjects(rows: &str) -> Result<Vec<SubjectMeta>, String> {
    rows.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(format!("line {}: expected age,gender,site,night", i + 1));
            }
            let mut m = SubjectMeta::new(f[3]);
            if !f[0].is_empty() {
                m.age = Some(f[0].parse().map_err(|_| format!("line {}: bad age '{}'", i + 1, f[0]))?);
            }
            m.gender = Gender::from_letter(f[1]);
            m.site = (!f[2].is_empty()).then(|| f[2].to_string());
            m.validate().map_err(|e| format!("line {}: {e}", i + 1))?;
            Ok(m)
        })
        .collect()
}

/// Weights, pseudo-negative flags and both losses for a toy batch.
///
/// Embeddings are drawn so that segments of one night share a component and
/// the two views of a segment share `signal` times its own component.
pub fn weights_view(rows: &str, margin: f64, tau: f64, signal: f64, seed: u64) -> Result<WeightsView, String> {
    let metas = parse_subjects(rows)?;
    let b = metas.len();
    if b < 2 {
        return Err("need at least two rows".into());
    }
    let cfg = DashConfig {
        margin,
        tau,
        ..DashConfig::default()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    let mut rng = stream(seed, &[]);
    let mut gauss = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let mut nights: Vec<(String, Vec<f64>)> = Vec::new();
    let (mut a, mut bv) = (Vec::with_capacity(b * EMB_DIM), Vec::with_capacity(b * EMB_DIM));
    for m in &metas {
        let shared = match nights.iter().find(|(id, _)| *id == m.night_id) {
            Some((_, v)) => v.clone(),
            None => {
                let v = gauss(EMB_DIM);
                nights.push((m.night_id.clone(), v.clone()));
                v
            }
        };
        let own = gauss(EMB_DIM);
        let (na, nb) = (gauss(EMB_DIM), gauss(EMB_DIM));
        for k in 0..EMB_DIM {
            let z = shared[k] + own[k];
            a.push(z + na[k]);
            bv.push(signal * z + nb[k]);
        }
    }
    let ta = Tensor::new(&[b, 1, EMB_DIM], a).map_err(|e| e.to_string())?;
    let tb = Tensor::new(&[b, 1, EMB_DIM], bv).map_err(|e| e.to_string())?;
    let s = similarity(&ta, &tb).map_err(|e| e.to_string())?;
    let pi = identity_pairing(b);
    let w = compute_weights(&metas, &pi, &cfg);
    let grid = |f: &dyn Fn(usize, usize) -> f64| -> Vec<Vec<f64>> { (0..b).map(|i| (0..b).map(|j| f(i, j)).collect()).collect() };
    Ok(WeightsView {
        omega: grid(&|i, j| w.omega(i, j)),
        pseudo: (0..b).map(|i| (0..b).map(|j| w.h(i, j)).collect()).collect(),
        sim: grid(&|i, j| s.data()[i * b + j]),
        infonce: base_infonce(&s, tau, &pi),
        dash: dash_loss_directional(&s, &w, &cfg, &pi, None),
        ln_b: (b as f64).ln(),
    })
}

#[derive(Debug, Serialize)]
pub struct RotaryView {
    /// `scores[m][n]` for query position `m` and key position `n`.
    pub scores: Vec<Vec<f64>>,
    /// Largest spread of scores along any diagonal `m - n = const`.
    pub max_diagonal_spread: f64,
}

/// Rotary attention logits of one random query/key pair at every position pair.
pub fn rotary_view(len: usize, dim: usize, seed: u64) -> Result<RotaryView, String> {
    if len == 0 || dim == 0 || dim % 2 != 0 {
        return Err("need len > 0 and an even dim > 0".into());
    }
    let mut rng = stream(seed, &[]);
    let mut gauss = || -> Vec<f64> { (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let (q, k) = (gauss(), gauss());
    let scores: Vec<Vec<f64>> = (0..len)
        .map(|m| (0..len).map(|n| rotary_score(&q, &k, m, n, ROPE_BASE)).collect())
        .collect();
    let mut spread = 0.0f64;
    for off in -(len as isize - 1)..len as isize {
        let diag: Vec<f64> = (0..len)
            .filter_map(|m| {
                let n = m as isize - off;
                (0..len as isize).contains(&n).then(|| scores[m][n as usize])
            })
            .collect();
        let lo = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = diag.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        spread = spread.max(hi - lo);
    }
    Ok(RotaryView {
        scores,
        max_diagonal_spread: spread,
    })
}

#[derive(Debug, Serialize)]
pub struct EcgView {
    pub rate: f64,
    pub ecg: Vec<f64>,
    /// Detected R-peak times in seconds.
    pub peaks: Vec<f64>,
    /// Interpolated inter-beat interval series.
    pub ibi_rate: f64,
    pub ibi: Vec<f64>,
    pub mean_ibi: f64,
}

/// Synthetic ECG with respiratory sinus arrhythmia, run through R-peak detection
/// and IBI derivation.
pub fn ecg_view(bpm: f64, rsa_bpm: f64, noise: f64, seconds: f64, seed: u64) -> Result<EcgView, String> {
    if !(20.0..=220.0).contains(&bpm) || !(rsa_bpm >= 0.0 && rsa_bpm < bpm / 2.0) {
        return Err("need 20 <= bpm <= 220 and 0 <= rsa < bpm / 2".into());
    }
    if !(10.0..=600.0).contains(&seconds) || !(noise >= 0.0) {
        return Err("need 10 <= seconds <= 600 and noise >= 0".into());
    }
    let rate = Modality::Ecg.canonical_rate();
    let mut beats = vec![0.3];
    loop {
        let t = *beats.last().unwrap();
        let hr = bpm + rsa_bpm * (std::f64::consts::TAU * 0.25 * t).sin();
        let next = t + 60.0 / hr;
        if next >= seconds {
            break;
        }
        beats.push(next);
    }
    let n = (rate * seconds) as usize;
    let mut rng = stream(seed, &[]);
    let mut ecg = vec![0.0; n];
    for &b in &beats {
        // P wave, QRS spike and T wave as Gaussian bumps.
        for (c, s, amp) in [(b - 0.16, 0.025, 0.12), (b, 0.012, 1.0), (b + 0.3, 0.05, 0.25)] {
            let lo = (((c - 5.0 * s) * rate).floor().max(0.0)) as usize;
            let hi = ((((c + 5.0 * s) * rate).ceil()) as usize).min(n);
            for (i, v) in ecg.iter_mut().enumerate().take(hi).skip(lo) {
                let t = i as f64 / rate;
                *v += amp * (-(t - c) * (t - c) / (2.0 * s * s)).exp();
            }
        }
    }
    for v in &mut ecg {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v += noise * z;
    }
    let peaks = detect_rpeaks(&ecg, rate).map_err(|e| e.to_string())?;
    let ibi = derive_ibi(&peaks, rate, seconds, &IbiConfig::default());
    let mean_ibi = ibi.iter().sum::<f64>() / ibi.len().max(1) as f64;
    Ok(EcgView {
        rate,
        peaks: peaks.iter().map(|&p| p as f64 / rate).collect(),
        ecg,
        ibi_rate: Modality::Ibi.canonical_rate(),
        ibi,
        mean_ibi,
    })
}

fn to_json<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn dash_weights(rows: &str, margin: f64, tau: f64, signal: f64, seed: u32) -> Result<String, JsError> {
    to_json(weights_view(rows, margin, tau, signal, seed as u64))
}

#[wasm_bindgen]
pub fn rotary_scores(len: usize, dim: usize, seed: u32) -> Result<String, JsError> {
    to_json(rotary_view(len, dim, seed as u64))
}

#[wasm_bindgen]
pub fn ecg_to_ibi(bpm: f64, rsa_bpm: f64, noise: f64, seconds: f64, seed: u32) -> Result<String, JsError> {
    to_json(ecg_view(bpm, rsa_bpm, noise, seconds, seed as u64))
}
