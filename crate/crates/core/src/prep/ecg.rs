//! R-peak detection and inter-beat-interval series.

use serde::{Deserialize, Serialize};

use super::filter::{butter_bandpass, filtfilt};
use super::PrepError;
use crate::modality::SLOW_RATE;

/// Minimum spacing between accepted beats in seconds.
pub const REFRACTORY_S: f64 = 0.25;

/// Pan-Tompkins style QRS detector.
///
/// Band-pass 5–15 Hz, central derivative, squaring and a 150 ms moving
/// integration; candidate maxima are classified against adaptive signal and
/// noise levels, with a search-back at half threshold after long gaps. Each
/// beat is then moved to the largest raw sample within ±75 ms.
pub fn detect_rpeaks(ecg: &[f64], rate: f64) -> Result<Vec<usize>, PrepError> {
    if !(rate >= 100.0 && rate.is_finite()) {
        return Err(PrepError::InvalidRate(rate));
    }
    let n = ecg.len();
    if (n as f64) < 2.0 * rate {
        return Err(PrepError::TooShort {
            need_s: 2.0,
            got_s: n as f64 / rate,
        });
    }
    let sos = butter_bandpass(2, 5.0, 15.0, rate);
    let band = filtfilt(&sos, ecg, (rate * 1.0) as usize);

    let mut energy = vec![0.0; n];
    for i in 1..n - 1 {
        let d = (band[i + 1] - band[i - 1]) / 2.0;
        energy[i] = d * d;
    }
    let half = ((0.075 * rate).round() as usize).max(1);
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + energy[i];
    }
    let integ: Vec<f64> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect();

    let peak_max = integ.iter().copied().fold(0.0, f64::max);
    if !(peak_max > 0.0) {
        return Ok(Vec::new());
    }
    // Local maxima, dropping numerical ripple far below the signal scale.
    let floor = peak_max * 1e-6;
    let candidates: Vec<usize> = (1..n - 1)
        .filter(|&i| integ[i] > floor && integ[i] > integ[i - 1] && integ[i] >= integ[i + 1])
        .collect();

    let refractory = (REFRACTORY_S * rate).round() as usize;
    let learn = (2.0 * rate) as usize;
    let init_max = integ[..learn].iter().copied().fold(0.0, f64::max);
    let init_mean = integ[..learn].iter().sum::<f64>() / learn as f64;
    let mut spki = init_max / 3.0;
    let mut npki = init_mean / 2.0;
    let mut beats: Vec<usize> = Vec::new();
    let mut rr_avg = rate; // one second until beats are seen
    let mut noise_since_beat: Vec<usize> = Vec::new();

    for &c in &candidates {
        let thr = npki + 0.25 * (spki - npki);
        let last = beats.last().copied();
        // Search back for a missed beat among the noise peaks of a long gap.
        if let Some(b) = last {
            if (c - b) as f64 > 1.66 * rr_avg {
                let thr2 = thr / 2.0;
                let missed = noise_since_beat
                    .iter()
                    .copied()
                    .filter(|&p| p > b && p - b >= refractory && c - p >= refractory && integ[p] > thr2)
                    .max_by(|&x, &y| integ[x].total_cmp(&integ[y]));
                if let Some(p) = missed {
                    beats.push(p);
                    spki = 0.25 * integ[p] + 0.75 * spki;
                }
                noise_since_beat.clear();
            }
        }
        let last = beats.last().copied();
        let v = integ[c];
        if v > thr && last.is_none_or(|b| c - b >= refractory) {
            beats.push(c);
            spki = 0.125 * v + 0.875 * spki;
            noise_since_beat.clear();
            if beats.len() >= 2 {
                let k = beats.len().min(9);
                let w = &beats[beats.len() - k..];
                rr_avg = (w[k - 1] - w[0]) as f64 / (k - 1) as f64;
            }
        } else if v > thr && last.is_some_and(|b| c - b < refractory) {
            let b = last.unwrap();
            if v > integ[b] {
                *beats.last_mut().unwrap() = c;
            }
        } else {
            npki = 0.125 * v + 0.875 * npki;
            noise_since_beat.push(c);
        }
    }

    let reach = ((0.075 * rate).round() as usize).max(1);
    let mut refined: Vec<usize> = Vec::with_capacity(beats.len());
    for b in beats {
        let lo = b.saturating_sub(reach);
        let hi = (b + reach + 1).min(n);
        let mut best = lo;
        for i in lo..hi {
            if ecg[i] > ecg[best] {
                best = i;
            }
        }
        let mut keep = true;
        while let Some(&prev) = refined.last() {
            if best > prev && best - prev >= refractory {
                break;
            }
            if ecg[best] > ecg[prev] {
                refined.pop();
            } else {
                keep = false;
                break;
            }
        }
        if keep {
            refined.push(best);
        }
    }
    Ok(refined)
}

/// Outlier rule applied to raw inter-beat intervals before interpolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IbiConfig {
    /// Plausible interval range in seconds.
    pub min_s: f64,
    pub max_s: f64,
    /// Maximum relative deviation from the running median.
    pub max_rel_dev: f64,
    /// Centred running-median window, in intervals.
    pub median_window: usize,
}

impl Default for IbiConfig {
    fn default() -> Self {
        Self {
            min_s: 0.3,
            max_s: 2.0,
            max_rel_dev: 0.3,
            median_window: 5,
        }
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Cleaned `(time, interval)` pairs; each interval is placed at the midpoint
/// of its two beats.
pub fn clean_intervals(rpeaks: &[usize], rate: f64, cfg: &IbiConfig) -> Vec<(f64, f64)> {
    let raw: Vec<(f64, f64)> = rpeaks
        .windows(2)
        .map(|w| {
            let (a, b) = (w[0] as f64 / rate, w[1] as f64 / rate);
            (0.5 * (a + b), b - a)
        })
        .filter(|&(_, d)| d >= cfg.min_s && d <= cfg.max_s)
        .collect();
    let half = cfg.median_window / 2;
    (0..raw.len())
        .filter(|&i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(raw.len());
            let mut win: Vec<f64> = raw[lo..hi].iter().map(|p| p.1).collect();
            let med = median(&mut win);
            (raw[i].1 - med).abs() <= cfg.max_rel_dev * med
        })
        .map(|i| raw[i])
        .collect()
}

/// Interval series on the 4 Hz grid covering `duration` seconds.
///
/// Cleaned intervals are linearly interpolated; grid points before the first
/// or after the last valid interval take the median interval, or 1.0 s if no
/// interval survives cleaning.
pub fn derive_ibi(rpeaks: &[usize], rate: f64, duration: f64, cfg: &IbiConfig) -> Vec<f64> {
    let n_out = (SLOW_RATE * duration).round().max(0.0) as usize;
    let pts = clean_intervals(rpeaks, rate, cfg);
    if pts.is_empty() {
        return vec![1.0; n_out];
    }
    let fill = median(&mut pts.iter().map(|p| p.1).collect::<Vec<_>>());
    let (t_first, t_last) = (pts[0].0, pts[pts.len() - 1].0);
    let mut j = 0;
    (0..n_out)
        .map(|k| {
            let t = k as f64 / SLOW_RATE;
            if t < t_first || t > t_last {
                return fill;
            }
            while j + 1 < pts.len() && pts[j + 1].0 < t {
                j += 1;
            }
            let (t0, v0) = pts[j];
            match pts.get(j + 1) {
                Some(&(t1, v1)) if t1 > t0 && t >= t0 => v0 + (v1 - v0) * (t - t0) / (t1 - t0),
                _ => v0,
            }
        })
        .collect()
}
