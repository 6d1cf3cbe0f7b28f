//! Recording → per-modality 30-second epoch matrices at canonical rates.

mod ecg;
mod filter;
mod resample;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::modality::{AliasTable, Modality, EPOCH_SECONDS, SLOW_RATE};
use crate::recording::{Recording, SubjectMeta};

pub use ecg::{clean_intervals, derive_ibi, detect_rpeaks, IbiConfig, REFRACTORY_S};
pub use filter::{butter_bandpass, filtfilt, response, sosfilt, sosfilt_zi, Biquad};
pub use resample::{resample, KAISER_BETA, TAPS_PER_PHASE};

/// Respiratory effort pass band in Hz.
pub const RESP_BAND: (f64, f64) = (0.1, 0.5);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PrepError {
    #[error("empty input")]
    EmptyInput,
    #[error("invalid sampling rate {0}")]
    InvalidRate(f64),
    #[error("degenerate statistics: std = {0}")]
    DegenerateStats(f64),
    #[error("signal too short: need {need_s} s, got {got_s} s")]
    TooShort { need_s: f64, got_s: f64 },
    #[error("no channel maps to a known modality")]
    NoKnownModalities,
    #[error("no cohort statistics for {0}")]
    MissingStats(Modality),
    #[error("invalid recording: {0}")]
    InvalidRecording(String),
}

/// Mean and standard deviation of one modality over the training corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalityStats {
    pub mean: f64,
    pub std: f64,
}

pub fn zscore(x: &[f64], stats: ModalityStats) -> Result<Vec<f64>, PrepError> {
    if !(stats.std > 0.0) {
        return Err(PrepError::DegenerateStats(stats.std));
    }
    Ok(x.iter().map(|v| (v - stats.mean) / stats.std).collect())
}

/// Per-modality normalization constants, fitted once and persisted.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CohortStats {
    pub modalities: BTreeMap<Modality, ModalityStats>,
}

impl CohortStats {
    pub fn get(&self, m: Modality) -> Result<ModalityStats, PrepError> {
        self.modalities.get(&m).copied().ok_or(PrepError::MissingStats(m))
    }

    /// Unit statistics (mean 0, std 1) for every modality.
    pub fn identity() -> Self {
        Self {
            modalities: Modality::ALL
                .iter()
                .map(|&m| (m, ModalityStats { mean: 0.0, std: 1.0 }))
                .collect(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("stats serialize")
    }

    pub fn from_toml(s: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(s)
    }

    pub fn validate(&self) -> Result<(), PrepError> {
        for s in self.modalities.values() {
            if !(s.std > 0.0) {
                return Err(PrepError::DegenerateStats(s.std));
            }
        }
        Ok(())
    }
}

/// Streaming mean/variance (Chan et al. pairwise update) per modality.
#[derive(Debug, Clone, Default)]
pub struct StatsAccumulator {
    acc: BTreeMap<Modality, (f64, f64, f64)>,
}

impl StatsAccumulator {
    pub fn add(&mut self, m: Modality, x: impl IntoIterator<Item = f64>) {
        let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
        for v in x {
            n += 1.0;
            let d = v - mean;
            mean += d / n;
            m2 += d * (v - mean);
        }
        if n == 0.0 {
            return;
        }
        let e = self.acc.entry(m).or_insert((0.0, 0.0, 0.0));
        let total = e.0 + n;
        let delta = mean - e.1;
        e.2 += m2 + delta * delta * e.0 * n / total;
        e.1 += delta * n / total;
        e.0 = total;
    }

    /// Add every modality of an unnormalized night.
    pub fn add_night(&mut self, night: &PreparedNight) {
        for (m, mat) in &night.epochs {
            self.add(*m, mat.data.iter().map(|&v| v as f64));
        }
    }

    pub fn finish(&self) -> Result<CohortStats, PrepError> {
        let mut out = CohortStats::default();
        for (&m, &(n, mean, m2)) in &self.acc {
            let std = (m2 / n).sqrt();
            if !(std > 0.0) {
                return Err(PrepError::DegenerateStats(std));
            }
            out.modalities.insert(m, ModalityStats { mean, std });
        }
        Ok(out)
    }
}

/// Row-major `[rows × cols]` epoch matrix stored in single precision, the
/// precision of the corpus files.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl EpochMatrix {
    pub fn from_signal(x: &[f64], rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: x[..rows * cols].iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Rows `start..start + len` widened to f64, concatenated.
    pub fn rows_f64(&self, start: usize, len: usize) -> Vec<f64> {
        self.data[start * self.cols..(start + len) * self.cols]
            .iter()
            .map(|&v| v as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedNight {
    pub epochs: BTreeMap<Modality, EpochMatrix>,
    pub meta: SubjectMeta,
}

impl PreparedNight {
    pub fn n_epochs(&self) -> usize {
        self.epochs.values().next().map_or(0, |m| m.rows)
    }

    pub fn modality_set(&self) -> Vec<Modality> {
        self.epochs.keys().copied().collect()
    }

    pub fn has(&self, m: Modality) -> bool {
        self.epochs.contains_key(&m)
    }

    pub fn validate(&self) -> Result<(), String> {
        let e = self.n_epochs();
        for (m, mat) in &self.epochs {
            if mat.rows != e {
                return Err(format!("{m} has {} epochs, expected {e}", mat.rows));
            }
            if mat.cols != m.token_width() {
                return Err(format!("{m} has width {}, expected {}", mat.cols, m.token_width()));
            }
            if mat.data.len() != mat.rows * mat.cols {
                return Err(format!("{m} buffer length mismatch"));
            }
            if mat.data.iter().any(|v| !v.is_finite()) {
                return Err(format!("{m} contains non-finite values"));
            }
        }
        Ok(())
    }

    /// Apply cohort z-scoring to every modality.
    pub fn normalized(mut self, stats: &CohortStats) -> Result<Self, PrepError> {
        for (m, mat) in self.epochs.iter_mut() {
            let s = stats.get(*m)?;
            if !(s.std > 0.0) {
                return Err(PrepError::DegenerateStats(s.std));
            }
            for v in mat.data.iter_mut() {
                *v = ((*v as f64 - s.mean) / s.std) as f32;
            }
        }
        Ok(self)
    }
}

/// Band-pass the respiratory source, resample to 4 Hz and remove the mean.
pub fn derive_resp(src: &[f64], rate: f64) -> Result<Vec<f64>, PrepError> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(PrepError::InvalidRate(rate));
    }
    let got_s = src.len() as f64 / rate;
    if got_s < EPOCH_SECONDS {
        return Err(PrepError::TooShort { need_s: EPOCH_SECONDS, got_s });
    }
    // Keep the upper edge below Nyquist for very slow sources.
    let hi = RESP_BAND.1.min(0.4 * rate);
    let lo = RESP_BAND.0.min(hi / 2.0);
    let sos = butter_bandpass(2, lo, hi, rate);
    let padlen = (3.0 * rate / lo).ceil() as usize;
    let filtered = filtfilt(&sos, src, padlen);
    let mut out = resample(&filtered, rate, SLOW_RATE)?;
    let mean = out.iter().sum::<f64>() / out.len() as f64;
    for v in &mut out {
        *v -= mean;
    }
    Ok(out)
}

/// Options of the preprocessing pipeline.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PrepConfig {
    pub aliases: AliasTable,
    pub ibi: IbiConfig,
}

/// Resample, derive IBI/RESP and cut into whole epochs without normalizing.
pub fn prepare_night_raw(rec: &Recording, cfg: &PrepConfig) -> Result<PreparedNight, PrepError> {
    rec.validate().map_err(|e| PrepError::InvalidRecording(e.0))?;
    let mut sources: BTreeMap<Modality, usize> = BTreeMap::new();
    for (i, c) in rec.channels.iter().enumerate() {
        if let Some(m) = cfg.aliases.resolve(&c.label) {
            if m.is_derived() {
                continue;
            }
            if sources.contains_key(&m) {
                log::debug!("ignoring extra {m} channel '{}'", c.label);
            } else {
                sources.insert(m, i);
            }
        }
    }
    if sources.is_empty() {
        return Err(PrepError::NoKnownModalities);
    }
    let duration = sources
        .values()
        .map(|&i| rec.channels[i].duration())
        .fold(f64::INFINITY, f64::min);
    let e = (duration / EPOCH_SECONDS + 1e-9).floor() as usize;
    if e == 0 {
        return Err(PrepError::TooShort {
            need_s: EPOCH_SECONDS,
            got_s: duration,
        });
    }

    let mut signals: BTreeMap<Modality, Vec<f64>> = BTreeMap::new();
    for (&m, &i) in &sources {
        let c = &rec.channels[i];
        signals.insert(m, resample(&c.samples, c.rate, m.canonical_rate())?);
    }
    if let Some(ecg) = signals.get(&Modality::Ecg) {
        let rate = Modality::Ecg.canonical_rate();
        let peaks = detect_rpeaks(ecg, rate)?;
        let ibi = derive_ibi(&peaks, rate, e as f64 * EPOCH_SECONDS, &cfg.ibi);
        signals.insert(Modality::Ibi, ibi);
    }
    let resp_src = sources.get(&Modality::Belt).or_else(|| sources.get(&Modality::Airflow));
    if let Some(&i) = resp_src {
        let c = &rec.channels[i];
        signals.insert(Modality::Resp, derive_resp(&c.samples, c.rate)?);
    }

    let mut epochs = BTreeMap::new();
    for (m, mut x) in signals {
        let width = m.token_width();
        if x.len() < e * width {
            // Rounding of the resampled length can leave a sample or two short.
            let last = *x.last().unwrap_or(&0.0);
            x.resize(e * width, last);
        }
        epochs.insert(m, EpochMatrix::from_signal(&x, e, width));
    }
    Ok(PreparedNight {
        epochs,
        meta: rec.subject_meta.clone(),
    })
}

/// Full pipeline: canonical rates, derived channels, epochs and cohort z-scoring.
pub fn prepare_night(rec: &Recording, stats: &CohortStats, cfg: &PrepConfig) -> Result<PreparedNight, PrepError> {
    prepare_night_raw(rec, cfg)?.normalized(stats)
}
