//! Rational-ratio polyphase resampling with a Kaiser-windowed sinc kernel.

use super::PrepError;

/// Kaiser window shape parameter.
pub const KAISER_BETA: f64 = 8.0;
/// Kernel taps per phase at unit cutoff; the support widens by 1/cutoff when
/// decimating so the number of sinc zero crossings stays fixed.
pub const TAPS_PER_PHASE: usize = 64;

const MAX_CACHED_PHASES: u64 = 8192;

/// Modified Bessel function of the first kind, order zero (power series).
pub(crate) fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Express `rate_out / rate_in` as `up / down` in lowest terms (rates are
/// snapped to a micro-Hz grid first).
fn ratio(rate_in: f64, rate_out: f64) -> (u64, u64) {
    let a = (rate_in * 1e6).round().max(1.0) as u64;
    let b = (rate_out * 1e6).round().max(1.0) as u64;
    let g = gcd(a, b);
    (b / g, a / g)
}

struct Kernel {
    cutoff: f64,
    half_width: f64,
    i0_beta: f64,
}

impl Kernel {
    /// Unit-DC-gain taps for an output sample at fractional input position
    /// `frac`, with the index of the first tap relative to `floor(position)`.
    fn taps(&self, frac: f64) -> (i64, Vec<f64>) {
        let t = frac;
        let first = (t - self.half_width).ceil() as i64;
        let last = (t + self.half_width).floor() as i64;
        let mut w: Vec<f64> = (first..=last)
            .map(|k| {
                let x = t - k as f64;
                let r = x / self.half_width;
                let win = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / self.i0_beta;
                self.cutoff * sinc(self.cutoff * x) * win
            })
            .collect();
        let s: f64 = w.iter().sum();
        for v in &mut w {
            *v /= s;
        }
        (first, w)
    }
}

/// Resample `x` from `rate_in` to `rate_out` Hz.
///
/// Output length is `round(len · rate_out / rate_in)`. Equal rates return an
/// exact copy. Samples beyond either end are treated as zero.
pub fn resample(x: &[f64], rate_in: f64, rate_out: f64) -> Result<Vec<f64>, PrepError> {
    if x.is_empty() {
        return Err(PrepError::EmptyInput);
    }
    for r in [rate_in, rate_out] {
        if !(r > 0.0 && r.is_finite()) {
            return Err(PrepError::InvalidRate(r));
        }
    }
    if rate_in == rate_out {
        return Ok(x.to_vec());
    }
    let (up, down) = ratio(rate_in, rate_out);
    let n_out = (x.len() as f64 * rate_out / rate_in).round() as usize;
    let cutoff = (up as f64 / down as f64).min(1.0);
    let kernel = Kernel {
        cutoff,
        half_width: TAPS_PER_PHASE as f64 / 2.0 / cutoff,
        i0_beta: bessel_i0(KAISER_BETA),
    };
    let cache_phases = up <= MAX_CACHED_PHASES;
    let mut cache: Vec<Option<(i64, Vec<f64>)>> = if cache_phases { vec![None; up as usize] } else { Vec::new() };
    let n_in = x.len() as i64;
    let mut out = Vec::with_capacity(n_out);
    for n in 0..n_out as u64 {
        let num = n * down;
        let base = (num / up) as i64;
        let phase = num % up;
        let frac = phase as f64 / up as f64;
        let computed;
        let (offset, taps) = if cache_phases {
            &*cache[phase as usize].get_or_insert_with(|| kernel.taps(frac))
        } else {
            computed = kernel.taps(frac);
            &computed
        };
        let start = base + *offset;
        let mut acc = 0.0;
        for (j, w) in taps.iter().enumerate() {
            let k = start + j as i64;
            if (0..n_in).contains(&k) {
                acc += w * x[k as usize];
            }
        }
        out.push(acc);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bessel_matches_reference_value() {
        // I0(8) = 427.564115721804...
        assert!((bessel_i0(8.0) - 427.564_115_721_804_7).abs() < 1e-9);
        assert_eq!(bessel_i0(0.0), 1.0);
    }

    #[test]
    fn ratio_reduces() {
        assert_eq!(ratio(256.0, 128.0), (1, 2));
        assert_eq!(ratio(250.0, 128.0), (64, 125));
        assert_eq!(ratio(1.0, 4.0), (4, 1));
    }
}
