//! Butterworth band-pass design and zero-phase second-order-section filtering.

use num_complex::Complex64;
use std::f64::consts::PI;

/// One normalized biquad section (`a[0] == 1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let num = self.b[0] + z_inv * (self.b[1] + z_inv * self.b[2]);
        let den = self.a[0] + z_inv * (self.a[1] + z_inv * self.a[2]);
        num / den
    }

    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (self.a[0] + self.a[1] + self.a[2])
    }
}

/// Digital Butterworth band-pass from an analog prototype of order `n`
/// (the band-pass itself has order `2n`), via the prewarped bilinear transform.
/// The pass-band gain is exactly 1 at the geometric centre frequency.
pub fn butter_bandpass(n: usize, f_lo: f64, f_hi: f64, fs: f64) -> Vec<Biquad> {
    assert!(n >= 1 && 0.0 < f_lo && f_lo < f_hi && f_hi < fs / 2.0, "invalid band-pass specification");
    let k = 2.0 * fs;
    let w1 = k * (PI * f_lo / fs).tan();
    let w2 = k * (PI * f_hi / fs).tan();
    let w0sq = w1 * w2;
    let bw = w2 - w1;

    let mut poles = Vec::with_capacity(2 * n);
    for i in 1..=n {
        let theta = PI * (2 * i + n - 1) as f64 / (2 * n) as f64;
        let p = Complex64::from_polar(1.0, theta) * bw;
        let disc = (p * p - 4.0 * w0sq).sqrt();
        for s in [(p + disc) / 2.0, (p - disc) / 2.0] {
            poles.push((k + s) / (k - s));
        }
    }
    // Conjugate pairs: keep upper-half-plane poles, pair leftover real ones.
    let mut sections = Vec::with_capacity(n);
    let mut reals = Vec::new();
    for z in &poles {
        if z.im > 1e-14 {
            sections.push([1.0, -2.0 * z.re, z.norm_sqr()]);
        } else if z.im.abs() <= 1e-14 {
            reals.push(z.re);
        }
    }
    for pair in reals.chunks(2) {
        let (r1, r2) = (pair[0], *pair.get(1).unwrap_or(&0.0));
        sections.push([1.0, -(r1 + r2), r1 * r2]);
    }
    let mut sos: Vec<Biquad> = sections
        .into_iter()
        .map(|a| Biquad { b: [1.0, 0.0, -1.0], a })
        .collect();

    let wc = 2.0 * (w0sq.sqrt() / k).atan();
    let gain = response(&sos, wc).norm();
    for v in &mut sos[0].b {
        *v /= gain;
    }
    sos
}

/// Complex response at normalized angular frequency `w` (radians/sample).
pub fn response(sos: &[Biquad], w: f64) -> Complex64 {
    let z_inv = Complex64::from_polar(1.0, -w);
    sos.iter().map(|s| s.response(z_inv)).product()
}

/// Transposed direct-form II cascade; `zi` is updated in place.
pub fn sosfilt(sos: &[Biquad], x: &[f64], zi: &mut [[f64; 2]]) -> Vec<f64> {
    let mut y = x.to_vec();
    for (s, z) in sos.iter().zip(zi.iter_mut()) {
        for v in y.iter_mut() {
            let xin = *v;
            let out = s.b[0] * xin + z[0];
            z[0] = s.b[1] * xin - s.a[1] * out + z[1];
            z[1] = s.b[2] * xin - s.a[2] * out;
            *v = out;
        }
    }
    y
}

/// Section states for a unit-step steady state.
pub fn sosfilt_zi(sos: &[Biquad]) -> Vec<[f64; 2]> {
    let mut level = 1.0;
    sos.iter()
        .map(|s| {
            let g = s.dc_gain();
            let z2 = (s.b[2] - s.a[2] * g) * level;
            let z1 = (s.b[1] - s.a[1] * g) * level + z2;
            level *= g;
            [z1, z2]
        })
        .collect()
}

/// Forward-backward filtering with odd-reflection padding of `padlen`
/// samples per side and steady-state initial conditions.
pub fn filtfilt(sos: &[Biquad], x: &[f64], padlen: usize) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let pad = padlen.min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

    let zi = sosfilt_zi(sos);
    let scaled = |v: f64| zi.iter().map(|z| [z[0] * v, z[1] * v]).collect::<Vec<_>>();
    let mut fwd = sosfilt(sos, &ext, &mut scaled(ext[0]));
    fwd.reverse();
    let mut back = sosfilt(sos, &fwd, &mut scaled(fwd[0]));
    back.reverse();
    back[pad..pad + n].to_vec()
}
