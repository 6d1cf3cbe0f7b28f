//! Synthetic multimodal nights with a shared latent state.
//!
//! Each night follows a five-stage Markov chain (W, N1, N2, N3, REM) at epoch
//! resolution plus a slow AR(1) arousal latent. Every channel is emitted from
//! the same stage/latent sequence, so views of one segment are genuinely
//! related. Sites add a channel-specific additive signature scaled by the
//! confound strength, and a per-subject binary trait shifts heart rate and
//! muscle tone to give a night-level target.

use std::f64::consts::TAU;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Labels, NightLabels, Split};
use crate::edf::write_edf_file;
use crate::modality::{Modality, EPOCH_SECONDS};
use crate::prep::{prepare_night_raw, CohortStats, PrepConfig, PrepError, PreparedNight, StatsAccumulator};
use crate::recording::{Channel, Gender, Recording, SubjectMeta};
use crate::rng::stream;

pub const STAGE_NAMES: [&str; 5] = ["W", "N1", "N2", "N3", "REM"];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("preparing night {night}: {source}")]
    Prep { night: String, source: PrepError },
    #[error("i/o: {0}")]
    Io(String),
}

/// Per-stage emission parameters, indexed W, N1, N2, N3, REM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Emission {
    /// Dominant EEG rhythm in Hz and its amplitude.
    pub eeg_freq: [f64; 5],
    pub eeg_amp: [f64; 5],
    /// EOG and EMG standard deviations.
    pub eog_std: [f64; 5],
    pub emg_std: [f64; 5],
    pub heart_bpm: [f64; 5],
    pub breath_per_min: [f64; 5],
    pub breath_amp: [f64; 5],
    /// SpO2 offset from the subject baseline, in percent.
    pub spo2_shift: [f64; 5],
}

impl Default for Emission {
    fn default() -> Self {
        Self {
            eeg_freq: [10.0, 5.0, 13.0, 1.5, 7.0],
            eeg_amp: [1.0, 0.8, 1.1, 2.5, 0.7],
            eog_std: [1.5, 0.8, 0.4, 0.3, 2.0],
            emg_std: [1.5, 1.0, 0.7, 0.5, 0.2],
            heart_bpm: [75.0, 68.0, 60.0, 55.0, 72.0],
            breath_per_min: [18.0, 16.0, 14.0, 12.0, 17.0],
            breath_amp: [1.2, 1.0, 0.8, 1.3, 0.6],
            spo2_shift: [0.5, 0.0, -0.5, -0.8, -1.2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub nights_per_subject: usize,
    pub epochs_per_night: usize,
    /// Row-stochastic stage transition matrix.
    pub transition: [[f64; 5]; 5],
    pub initial: [f64; 5],
    pub emission: Emission,
    /// AR(1) coefficient and innovation std of the epoch-level latent.
    pub latent_rho: f64,
    pub latent_std: f64,
    /// Heart-rate change in bpm per unit latent.
    pub hr_latent_gain: f64,
    /// Heart-rate increase for subjects carrying the trait.
    pub trait_hr_shift: f64,
    pub trait_fraction: f64,
    pub age_range: (f64, f64),
    pub female_fraction: f64,
    pub sites: Vec<String>,
    pub confound: f64,
    pub fast_rate: f64,
    pub resp_rate: f64,
    pub spo2_rate: f64,
    /// Subject-level split fractions for pretrain and finetune; the rest is test.
    pub pretrain_fraction: f64,
    pub finetune_fraction: f64,
    /// Nights from this site all go to the test split.
    pub holdout_site: Option<String>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_subjects: 100,
            nights_per_subject: 2,
            epochs_per_night: 24,
            transition: [
                [0.85, 0.10, 0.03, 0.00, 0.02],
                [0.08, 0.70, 0.17, 0.00, 0.05],
                [0.03, 0.04, 0.83, 0.07, 0.03],
                [0.02, 0.00, 0.13, 0.85, 0.00],
                [0.05, 0.04, 0.05, 0.00, 0.86],
            ],
            initial: [0.2; 5],
            emission: Emission::default(),
            latent_rho: 0.8,
            latent_std: 0.6,
            hr_latent_gain: 4.0,
            trait_hr_shift: 20.0,
            trait_fraction: 0.5,
            age_range: (20.0, 80.0),
            female_fraction: 0.5,
            sites: ["A", "B", "C", "D"].iter().map(|s| s.to_string()).collect(),
            confound: 0.0,
            fast_rate: 128.0,
            resp_rate: 16.0,
            spo2_rate: 1.0,
            pretrain_fraction: 0.6,
            finetune_fraction: 0.2,
            holdout_site: None,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        for (i, row) in self.transition.iter().enumerate() {
            if row.iter().any(|&p| !(p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad(format!("transition row {i} is not a distribution"));
            }
        }
        if self.initial.iter().any(|&p| !(p >= 0.0)) || (self.initial.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("initial stage distribution does not sum to 1".into());
        }
        let e = &self.emission;
        let positive = [e.eeg_freq, e.eeg_amp, e.eog_std, e.emg_std, e.heart_bpm, e.breath_per_min, e.breath_amp];
        if positive.iter().flatten().any(|&v| !(v > 0.0)) {
            return bad("emission parameters must be positive".into());
        }
        if self.n_subjects == 0 || self.nights_per_subject == 0 {
            return bad("need at least one subject and night".into());
        }
        if self.sites.is_empty() {
            return bad("site list is empty".into());
        }
        if !(0.0..=1.0).contains(&self.confound) {
            return bad(format!("confound {} outside [0, 1]", self.confound));
        }
        if !(self.fast_rate >= 100.0) || !(self.resp_rate > 1.0) || !(self.spo2_rate > 0.0) {
            return bad("sampling rates too low (fast >= 100 Hz, resp > 1 Hz)".into());
        }
        if !(self.age_range.0 >= 0.0 && self.age_range.1 <= 120.0 && self.age_range.0 <= self.age_range.1) {
            return bad("age range must lie in [0, 120]".into());
        }
        let f = self.pretrain_fraction + self.finetune_fraction;
        if !(self.pretrain_fraction >= 0.0 && self.finetune_fraction >= 0.0 && f <= 1.0) {
            return bad("split fractions must be non-negative and sum to at most 1".into());
        }
        if let Some(s) = &self.holdout_site {
            if !self.sites.contains(s) {
                return bad(format!("holdout site '{s}' is not in the site list"));
            }
        }
        Ok(())
    }
}

/// Ground truth for one generated night.
#[derive(Debug, Clone, PartialEq)]
pub struct NightTruth {
    pub stages: Vec<u8>,
    pub latent: Vec<f64>,
    pub trait_bit: bool,
    pub site_index: usize,
}

#[derive(Debug, Clone)]
pub struct SynthNight {
    pub recording: Recording,
    pub truth: NightTruth,
    pub split: Split,
}

/// Generated corpus: normalized nights, the stats fitted on the pretrain
/// split, and optionally the raw recordings.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub corpus: Corpus,
    pub stats: CohortStats,
    pub recordings: Option<Vec<Recording>>,
}

fn sample_index(r: &mut ChaCha8Rng, p: &[f64]) -> usize {
    let u: f64 = r.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

fn gauss(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

struct Subject {
    meta: SubjectMeta,
    trait_bit: bool,
    site_index: usize,
    split: Split,
    spo2_base: f64,
}

fn subjects(spec: &SynthSpec) -> Vec<Subject> {
    let mut r = stream(spec.seed, &[1]);
    let n = spec.n_subjects;
    let mut order: Vec<usize> = (0..n).collect();
    // Deterministic shuffle for split assignment.
    for i in (1..n).rev() {
        order.swap(i, r.random_range(0..=i));
    }
    let n_pre = (spec.pretrain_fraction * n as f64).round() as usize;
    let n_fine = (spec.finetune_fraction * n as f64).round() as usize;
    let mut split_of = vec![Split::Test; n];
    for (rank, &s) in order.iter().enumerate() {
        split_of[s] = if rank < n_pre {
            Split::Pretrain
        } else if rank < n_pre + n_fine {
            Split::Finetune
        } else {
            Split::Test
        };
    }
    (0..n)
        .map(|s| {
            let mut meta = SubjectMeta::new(format!("s{s:03}"));
            meta.age = Some((r.random_range(spec.age_range.0..=spec.age_range.1) * 10.0).round() / 10.0);
            meta.gender = if r.random_bool(spec.female_fraction) { Gender::F } else { Gender::M };
            let site_index = s % spec.sites.len();
            meta.site = Some(spec.sites[site_index].clone());
            let trait_bit = r.random_bool(spec.trait_fraction);
            let held_out = spec.holdout_site.as_ref() == meta.site.as_ref();
            let split = if held_out {
                Split::Test
            } else if spec.holdout_site.is_some() && split_of[s] == Split::Test {
                // Redistribute the regular test share when a site is held out.
                if s % 2 == 0 { Split::Pretrain } else { Split::Finetune }
            } else {
                split_of[s]
            };
            Subject {
                meta,
                trait_bit,
                site_index,
                split,
                spo2_base: 96.0 + r.random_range(-1.0..1.0),
            }
        })
        .collect()
}

/// Smooth interpolation of per-epoch values onto a sample grid.
fn per_sample(epoch_values: &[f64], rate: f64, n: usize) -> Vec<f64> {
    let per = EPOCH_SECONDS * rate;
    (0..n)
        .map(|k| {
            let x = (k as f64 + 0.5) / per - 0.5;
            let i = x.floor().max(0.0) as usize;
            let j = (i + 1).min(epoch_values.len() - 1);
            let f = (x - i as f64).clamp(0.0, 1.0);
            epoch_values[i.min(epoch_values.len() - 1)] * (1.0 - f) + epoch_values[j] * f
        })
        .collect()
}

/// Additive site signature for one channel.
fn site_signature(spec: &SynthSpec, site: usize, channel: usize, rate: f64, n: usize, scale: f64) -> Vec<f64> {
    if spec.confound == 0.0 {
        return vec![0.0; n];
    }
    let sites = spec.sites.len() as f64;
    let offset = (site as f64 - (sites - 1.0) / 2.0) * 0.8;
    let freq = match rate {
        r if r >= 100.0 => 20.0 + 3.0 * site as f64 + channel as f64,
        r => (0.1 + 0.04 * site as f64).min(0.4 * r),
    };
    (0..n)
        .map(|k| spec.confound * scale * (offset + 0.6 * (TAU * freq * k as f64 / rate).sin()))
        .collect()
}

fn generate_night(spec: &SynthSpec, index: usize, subj: &Subject, night: usize) -> SynthNight {
    let mut r = stream(spec.seed, &[2, index as u64, night as u64]);
    let e = spec.epochs_per_night;
    let em = &spec.emission;
    let mut stages = Vec::with_capacity(e);
    let mut latent = Vec::with_capacity(e);
    let mut s = sample_index(&mut r, &spec.initial);
    let mut z = gauss(&mut r) * spec.latent_std / (1.0 - spec.latent_rho * spec.latent_rho).max(1e-6).sqrt();
    for k in 0..e {
        if k > 0 {
            s = sample_index(&mut r, &spec.transition[s]);
            z = spec.latent_rho * z + spec.latent_std * gauss(&mut r);
        }
        stages.push(s as u8);
        latent.push(z);
    }
    let pick = |table: &[f64; 5]| -> Vec<f64> { stages.iter().map(|&s| table[s as usize]).collect() };
    let gain: Vec<f64> = latent.iter().map(|z| (0.3 * z).exp()).collect();
    let dur = e as f64 * EPOCH_SECONDS;
    let site = subj.site_index;

    // EEG: stage rhythm with a wandering phase, plus coloured and white noise.
    let fr = spec.fast_rate;
    let nf = (dur * fr).round() as usize;
    let freq = per_sample(&pick(&em.eeg_freq), fr, nf);
    let amp = per_sample(&pick(&em.eeg_amp), fr, nf);
    let g_fast = per_sample(&gain, fr, nf);
    let mut phase = r.random_range(0.0..TAU);
    let mut colored = 0.0;
    let sig = site_signature(spec, site, 0, fr, nf, 1.0);
    let eeg: Vec<f64> = (0..nf)
        .map(|k| {
            phase += TAU * freq[k] / fr + 0.05 * gauss(&mut r);
            colored = 0.95 * colored + 0.3 * gauss(&mut r);
            g_fast[k] * (amp[k] * phase.sin() + 0.4 * colored) + 0.3 * gauss(&mut r) + sig[k]
        })
        .collect();

    // EOG: slow roving movements with stage-dependent variance.
    let eog_std = per_sample(&pick(&em.eog_std), fr, nf);
    let mut slow = 0.0;
    let sig = site_signature(spec, site, 1, fr, nf, 1.0);
    let eog: Vec<f64> = (0..nf)
        .map(|k| {
            slow = 0.995 * slow + 0.1 * gauss(&mut r);
            eog_std[k] * g_fast[k] * (slow + 0.3 * gauss(&mut r)) + sig[k]
        })
        .collect();

    // EMG: broadband noise scaled by tone; trait carriers have higher tone.
    let tone = if subj.trait_bit { 1.6 } else { 1.0 };
    let emg_std = per_sample(&pick(&em.emg_std), fr, nf);
    let sig = site_signature(spec, site, 2, fr, nf, 1.0);
    let emg: Vec<f64> = (0..nf)
        .map(|k| tone * emg_std[k] * g_fast[k] * gauss(&mut r) + sig[k])
        .collect();

    // ECG: Gaussian R-waves at the instantaneous heart rate.
    let hr_epoch: Vec<f64> = stages
        .iter()
        .zip(&latent)
        .map(|(&s, &z)| {
            em.heart_bpm[s as usize] + spec.hr_latent_gain * z + if subj.trait_bit { spec.trait_hr_shift } else { 0.0 }
        })
        .map(|bpm| bpm.clamp(35.0, 150.0))
        .collect();
    let hr = per_sample(&hr_epoch, fr, nf);
    let mut beats = Vec::new();
    let mut t = r.random_range(0.0..0.5);
    while t < dur + 1.0 {
        beats.push(t);
        let k = ((t * fr) as usize).min(nf - 1);
        t += 60.0 / hr[k];
    }
    let sig = site_signature(spec, site, 3, fr, nf, 0.3);
    let mut ecg: Vec<f64> = (0..nf).map(|k| 0.02 * gauss(&mut r) + sig[k]).collect();
    let width = 0.012;
    for &b in &beats {
        let lo = (((b - 0.25) * fr).floor().max(0.0)) as usize;
        let hi = (((b + 0.35) * fr).ceil() as usize).min(nf);
        for (k, v) in ecg.iter_mut().enumerate().take(hi).skip(lo) {
            let dt = k as f64 / fr - b;
            *v += (-0.5 * (dt / width).powi(2)).exp() - 0.15 * (-0.5 * ((dt - 0.03) / 0.015).powi(2)).exp()
                + 0.12 * (-0.5 * ((dt - 0.25) / 0.04).powi(2)).exp();
        }
    }

    // Airflow and belt share the breathing cycle; the belt lags slightly.
    let rr = spec.resp_rate;
    let nr = (dur * rr).round() as usize;
    let bpm = per_sample(&pick(&em.breath_per_min), rr, nr);
    let bamp = per_sample(&pick(&em.breath_amp), rr, nr);
    let g_resp = per_sample(&gain, rr, nr);
    let mut bphase = r.random_range(0.0..TAU);
    let mut airflow = Vec::with_capacity(nr);
    let mut belt = Vec::with_capacity(nr);
    let sig_a = site_signature(spec, site, 4, rr, nr, 1.0);
    let sig_b = site_signature(spec, site, 5, rr, nr, 1.0);
    for k in 0..nr {
        bphase += TAU * bpm[k] / 60.0 / rr + 0.01 * gauss(&mut r);
        let a = bamp[k] * g_resp[k];
        airflow.push(a * bphase.sin() + 0.1 * gauss(&mut r) + sig_a[k]);
        belt.push(a * (bphase - 0.4).sin() + 0.1 * gauss(&mut r) + sig_b[k]);
    }

    // SpO2: subject baseline, stage shift and a slow drift.
    let sr = spec.spo2_rate;
    let ns = (dur * sr).round() as usize;
    let shift = per_sample(&pick(&em.spo2_shift), sr, ns);
    let mut drift = 0.0;
    let sig = site_signature(spec, site, 6, sr, ns, 1.0);
    let spo2: Vec<f64> = (0..ns)
        .map(|k| {
            drift = 0.98 * drift + 0.05 * gauss(&mut r);
            (subj.spo2_base + shift[k] + drift + sig[k]).min(100.0)
        })
        .collect();

    let mut meta = subj.meta.clone();
    meta.night_id = format!("{}-n{night}", subj.meta.night_id);
    let recording = Recording {
        channels: vec![
            Channel::new("EEG C4-M1", fr, eeg).with_unit("uV"),
            Channel::new("EOG E1-M2", fr, eog).with_unit("uV"),
            Channel::new("EMG Chin", fr, emg).with_unit("uV"),
            Channel::new("ECG II", fr, ecg).with_unit("mV"),
            Channel::new("Airflow", rr, airflow),
            Channel::new("Thor belt", rr, belt),
            Channel::new("SpO2", sr, spo2).with_unit("%"),
        ],
        start_time: crate::edf::default_start(),
        subject_meta: meta,
    };
    SynthNight {
        recording,
        truth: NightTruth {
            stages,
            latent,
            trait_bit: subj.trait_bit,
            site_index: site,
        },
        split: subj.split,
    }
}

/// Raw recordings and ground truth, in subject-then-night order.
pub fn generate_raw(spec: &SynthSpec) -> Result<Vec<SynthNight>, SynthError> {
    spec.validate()?;
    let subs = subjects(spec);
    let jobs: Vec<(usize, usize)> = (0..subs.len())
        .flat_map(|s| (0..spec.nights_per_subject).map(move |n| (s, n)))
        .collect();
    Ok(map_jobs(&jobs, |&(s, n)| generate_night(spec, s, &subs[s], n)))
}

#[cfg(feature = "parallel")]
fn map_jobs<T: Sync, U: Send>(jobs: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    use rayon::prelude::*;
    jobs.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_jobs<T, U>(jobs: &[T], f: impl Fn(&T) -> U) -> Vec<U> {
    jobs.iter().map(f).collect()
}

/// Generate, prepare and normalize a full corpus.
///
/// Cohort statistics are fitted on the pretrain split only (or on every night
/// if that split is empty).
pub fn generate(spec: &SynthSpec, keep_raw: bool) -> Result<SynthOutput, SynthError> {
    let raw = generate_raw(spec)?;
    let cfg = PrepConfig::default();
    let prepared: Vec<Result<PreparedNight, SynthError>> = map_jobs(&raw, |n| {
        prepare_night_raw(&n.recording, &cfg).map_err(|source| SynthError::Prep {
            night: n.recording.subject_meta.night_id.clone(),
            source,
        })
    });
    let prepared: Vec<PreparedNight> = prepared.into_iter().collect::<Result<_, _>>()?;
    let mut acc = StatsAccumulator::default();
    let any_pretrain = raw.iter().any(|n| n.split == Split::Pretrain);
    for (p, n) in prepared.iter().zip(&raw) {
        if !any_pretrain || n.split == Split::Pretrain {
            acc.add_night(p);
        }
    }
    let stats = acc.finish().map_err(|source| SynthError::Prep {
        night: "cohort".into(),
        source,
    })?;
    let nights = prepared
        .into_iter()
        .map(|p| p.normalized(&stats))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|source| SynthError::Prep {
            night: "cohort".into(),
            source,
        })?;
    let mut labels = Labels::new();
    for n in &raw {
        labels.insert(
            n.recording.subject_meta.night_id.clone(),
            NightLabels {
                stages: n.truth.stages.clone(),
                target: Some(n.truth.trait_bit as u8),
            },
        );
    }
    let splits = raw.iter().map(|n| n.split).collect();
    let recordings = keep_raw.then(|| raw.into_iter().map(|n| n.recording).collect());
    Ok(SynthOutput {
        corpus: Corpus::new(nights, splits, labels),
        stats,
        recordings,
    })
}

/// Write a raw night as EDF.
pub fn export_edf(rec: &Recording, path: &Path) -> Result<(), SynthError> {
    if rec.duration() <= 0.0 || rec.channels.iter().any(|c| c.samples.is_empty()) {
        return Err(SynthError::Io(format!("night '{}' has no samples", rec.subject_meta.night_id)));
    }
    write_edf_file(rec, path).map_err(|e| SynthError::Io(e.to_string()))
}

/// Modalities present in every synthetic night after preparation.
pub fn synthetic_modalities() -> Vec<Modality> {
    Modality::ALL.to_vec()
}
