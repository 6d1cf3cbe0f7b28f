//! EDF / continuous EDF+ reader and writer.
//!
//! Files are parsed completely in memory; a file either yields a full
//! [`Recording`] or an [`EdfError`]. Annotation signals of EDF+ files are
//! skipped. The writer always emits classic EDF with EDF+-style patient and
//! recording subfields, which strict EDF+ readers also accept as plain EDF.

use std::path::Path;

use chrono::{DateTime, Datelike, NaiveDate, TimeZone, Timelike, Utc};
use thiserror::Error;

use crate::recording::{Channel, Gender, Recording, SubjectMeta};

pub const DIGITAL_MIN: i32 = -32768;
pub const DIGITAL_MAX: i32 = 32767;

const ANNOTATION_LABEL: &str = "EDF Annotations";
const MONTHS: [&str; 12] = ["JAN", "FEB", "MAR", "APR", "MAY", "JUN", "JUL", "AUG", "SEP", "OCT", "NOV", "DEC"];

#[derive(Debug, Error)]
pub enum EdfError {
    #[error("malformed header field '{field}': {value:?}")]
    MalformedHeader { field: String, value: String },
    #[error("file declares {declared} data records but contains {found}")]
    TruncatedRecords { declared: usize, found: usize },
    #[error("channel '{channel}' has digital min == digital max")]
    CalibrationDegenerate { channel: String },
    #[error("unsupported file: {0}")]
    Unsupported(String),
    #[error("channel '{channel}': value {value} outside physical range [{lo}, {hi}]")]
    Unrepresentable { channel: String, value: f64, lo: f64, hi: f64 },
    #[error("cannot export recording: {0}")]
    InvalidRecording(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn malformed(field: impl Into<String>, value: impl Into<String>) -> EdfError {
    EdfError::MalformedHeader {
        field: field.into(),
        value: value.into(),
    }
}

struct SignalHeader {
    label: String,
    unit: String,
    pmin: f64,
    pmax: f64,
    dmin: i32,
    dmax: i32,
    spr: usize,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn field(&mut self, width: usize) -> String {
        let s = &self.buf[self.pos..self.pos + width];
        self.pos += width;
        s.iter()
            .map(|&b| if (0x20..0x7f).contains(&b) { b as char } else { ' ' })
            .collect::<String>()
            .trim()
            .to_string()
    }
}

fn parse_f64(field: &str, text: &str) -> Result<f64, EdfError> {
    match text.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(malformed(field, text)),
    }
}

fn parse_int(field: &str, text: &str) -> Result<i64, EdfError> {
    text.parse::<i64>().map_err(|_| malformed(field, text))
}

pub fn read_edf(bytes: &[u8]) -> Result<Recording, EdfError> {
    if bytes.len() < 256 {
        return Err(malformed("header", format!("{} bytes, need 256", bytes.len())));
    }
    let mut c = Cursor { buf: bytes, pos: 0 };
    let _version = c.field(8);
    let patient = c.field(80);
    let recording = c.field(80);
    let date = c.field(8);
    let time = c.field(8);
    let header_bytes = parse_int("header bytes", &c.field(8))?;
    let reserved = c.field(44);
    let n_records = parse_int("number of data records", &c.field(8))?;
    let record_duration = parse_f64("data record duration", &c.field(8))?;
    let ns = parse_int("number of signals", &c.field(4))?;

    if reserved.starts_with("EDF+D") {
        return Err(EdfError::Unsupported("discontinuous EDF+".into()));
    }
    if ns < 0 || ns > 4096 {
        return Err(malformed("number of signals", ns.to_string()));
    }
    let ns = ns as usize;
    if header_bytes != 256 * (ns as i64 + 1) {
        return Err(malformed("header bytes", header_bytes.to_string()));
    }
    if bytes.len() < 256 * (ns + 1) {
        return Err(malformed("signal headers", format!("{} bytes, need {}", bytes.len(), 256 * (ns + 1))));
    }
    if record_duration <= 0.0 {
        return Err(malformed("data record duration", record_duration.to_string()));
    }

    let col = |c: &mut Cursor<'_>, width: usize| (0..ns).map(|_| c.field(width)).collect::<Vec<_>>();
    let labels = col(&mut c, 16);
    let _transducers = col(&mut c, 80);
    let units = col(&mut c, 8);
    let pmins = col(&mut c, 8);
    let pmaxs = col(&mut c, 8);
    let dmins = col(&mut c, 8);
    let dmaxs = col(&mut c, 8);
    let _prefilters = col(&mut c, 80);
    let sprs = col(&mut c, 8);

    let mut signals = Vec::with_capacity(ns);
    for i in 0..ns {
        let spr = parse_int("samples per record", &sprs[i])?;
        if spr < 0 || spr > 1 << 24 {
            return Err(malformed("samples per record", sprs[i].clone()));
        }
        let dmin = parse_int("digital minimum", &dmins[i])?;
        let dmax = parse_int("digital maximum", &dmaxs[i])?;
        let range = i16::MIN as i64..=i16::MAX as i64;
        if !range.contains(&dmin) || !range.contains(&dmax) {
            return Err(malformed("digital range", format!("{dmin}..{dmax}")));
        }
        signals.push(SignalHeader {
            label: labels[i].clone(),
            unit: units[i].clone(),
            pmin: parse_f64("physical minimum", &pmins[i])?,
            pmax: parse_f64("physical maximum", &pmaxs[i])?,
            dmin: dmin as i32,
            dmax: dmax as i32,
            spr: spr as usize,
        });
    }

    for (i, s) in signals.iter().enumerate() {
        if signals[..i].iter().any(|o| o.label == s.label && s.label != ANNOTATION_LABEL) {
            return Err(malformed("label", format!("duplicate '{}'", s.label)));
        }
    }

    let record_samples: usize = signals.iter().map(|s| s.spr).sum();
    let record_bytes = record_samples * 2;
    let data = &bytes[256 * (ns + 1)..];
    let available = if record_bytes == 0 { 0 } else { data.len() / record_bytes };
    let n_records = match n_records {
        -1 => available,
        n if n < 0 => return Err(malformed("number of data records", n.to_string())),
        n => {
            let n = n as usize;
            if available < n {
                return Err(EdfError::TruncatedRecords {
                    declared: n,
                    found: available,
                });
            }
            n
        }
    };

    let start_time = parse_start(&date, &time)?;
    let subject_meta = parse_meta(&patient, &recording, start_time);

    let mut channels = Vec::new();
    let mut offset = 0;
    for s in &signals {
        let this_offset = offset;
        offset += s.spr;
        if s.label == ANNOTATION_LABEL {
            log::warn!("skipping EDF+ annotation signal");
            continue;
        }
        if s.spr == 0 {
            return Err(malformed("samples per record", format!("0 for '{}'", s.label)));
        }
        if s.dmin == s.dmax {
            return Err(EdfError::CalibrationDegenerate {
                channel: s.label.clone(),
            });
        }
        let gain = (s.pmax - s.pmin) / (s.dmax - s.dmin) as f64;
        let mut samples = Vec::with_capacity(n_records * s.spr);
        for r in 0..n_records {
            let base = r * record_bytes + this_offset * 2;
            for k in 0..s.spr {
                let p = base + 2 * k;
                let d = i16::from_le_bytes([data[p], data[p + 1]]) as i32;
                samples.push(s.pmin + (d - s.dmin) as f64 * gain);
            }
        }
        channels.push(Channel {
            label: s.label.clone(),
            samples,
            rate: s.spr as f64 / record_duration,
            physical_unit: s.unit.clone(),
            physical_range: Some((s.pmin, s.pmax)),
        });
    }
    Ok(Recording {
        channels,
        start_time,
        subject_meta,
    })
}

fn parse_start(date: &str, time: &str) -> Result<DateTime<Utc>, EdfError> {
    let nums = |s: &str, field: &str| -> Result<[u32; 3], EdfError> {
        let parts: Vec<&str> = s.split('.').collect();
        if parts.len() != 3 {
            return Err(malformed(field, s));
        }
        let mut out = [0u32; 3];
        for (o, p) in out.iter_mut().zip(&parts) {
            *o = p.trim().parse().map_err(|_| malformed(field, s))?;
        }
        Ok(out)
    };
    let [dd, mm, yy] = nums(date, "start date")?;
    let [h, mi, se] = nums(time, "start time")?;
    let year = if yy >= 85 { 1900 + yy } else { 2000 + yy } as i32;
    NaiveDate::from_ymd_opt(year, mm, dd)
        .and_then(|d| d.and_hms_opt(h, mi, se))
        .map(|dt| Utc.from_utc_datetime(&dt))
        .ok_or_else(|| malformed("start date/time", format!("{date} {time}")))
}

fn parse_edfplus_date(s: &str) -> Option<NaiveDate> {
    let parts: Vec<&str> = s.split('-').collect();
    if parts.len() != 3 {
        return None;
    }
    let month = MONTHS.iter().position(|m| m.eq_ignore_ascii_case(parts[1]))? as u32 + 1;
    NaiveDate::from_ymd_opt(parts[2].parse().ok()?, month, parts[0].parse().ok()?)
}

fn parse_meta(patient: &str, recording: &str, start: DateTime<Utc>) -> SubjectMeta {
    let toks: Vec<&str> = patient.split_whitespace().collect();
    let mut meta = SubjectMeta::new("");
    let structured = toks.len() >= 2 && matches!(toks[1], "F" | "M" | "X");
    if structured {
        if toks[0] != "X" {
            meta.night_id = toks[0].to_string();
        }
        meta.gender = Gender::from_letter(toks[1]);
        if let Some(birth) = toks.get(2).and_then(|b| parse_edfplus_date(b)) {
            let days = (start.date_naive() - birth).num_days() as f64;
            meta.age = Some(days / 365.25);
        }
        for t in toks.iter().skip(4) {
            if let Some(a) = t.strip_prefix("age:").and_then(|a| a.parse::<f64>().ok()) {
                meta.age = Some(a);
            }
        }
    } else if !toks.is_empty() {
        meta.night_id = toks.join("_");
    }
    if let Some(a) = meta.age {
        if !(0.0..=120.0).contains(&a) || !a.is_finite() {
            log::warn!("ignoring implausible age {a} in EDF header");
            meta.age = None;
        }
    }
    if meta.night_id.is_empty() {
        meta.night_id = format!("night-{}", start.format("%Y%m%dT%H%M%S"));
    }
    let rtoks: Vec<&str> = recording.split_whitespace().collect();
    if rtoks.first() == Some(&"Startdate") {
        if let Some(site) = rtoks.get(2).filter(|s| **s != "X") {
            meta.site = Some(site.to_string());
        }
    }
    meta
}

/// Shortest decimal text of `x` that fits in `width` characters.
fn fmt_num(x: f64, width: usize) -> Option<String> {
    if x == 0.0 {
        return Some("0".into());
    }
    let plain = format!("{x}");
    if plain.len() <= width {
        return Some(plain);
    }
    (0..=width).rev().find_map(|p| {
        let s = trim_decimal(format!("{x:.p$}"));
        (s.len() <= width).then_some(s)
    })
}

/// Decimal text of a value ≤ `x` (`down`) or ≥ `x` that fits in `width`.
fn fmt_num_outward(x: f64, width: usize, down: bool) -> Option<String> {
    if let Some(s) = fmt_num(x, width) {
        let v: f64 = s.parse().ok()?;
        if (down && v <= x) || (!down && v >= x) {
            return Some(s);
        }
    }
    (0..=width).rev().find_map(|p| {
        let scale = 10f64.powi(p as i32);
        let snapped = if down { (x * scale).floor() } else { (x * scale).ceil() } / scale;
        let s = trim_decimal(format!("{snapped:.p$}"));
        let v: f64 = s.parse().ok()?;
        let ok = if down { v <= x } else { v >= x };
        (s.len() <= width && ok).then_some(s)
    })
}

fn trim_decimal(s: String) -> String {
    let s = if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    };
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_graphic() { c } else { '_' })
        .collect()
}

fn put(out: &mut Vec<u8>, text: &str, width: usize) {
    let bytes = text.as_bytes();
    let n = bytes.len().min(width);
    out.extend_from_slice(&bytes[..n]);
    out.extend(std::iter::repeat_n(b' ', width - n));
}

fn record_layout(rec: &Recording) -> Result<(f64, Vec<usize>, usize), EdfError> {
    const CANDIDATES: [f64; 15] = [1.0, 2.0, 4.0, 5.0, 10.0, 20.0, 30.0, 60.0, 3.0, 6.0, 15.0, 0.5, 0.25, 0.2, 0.1];
    'cand: for d in CANDIDATES {
        let mut sprs = Vec::with_capacity(rec.channels.len());
        let mut n_records = None;
        for c in &rec.channels {
            let spr = c.rate * d;
            let rounded = spr.round();
            if rounded < 1.0 || (spr - rounded).abs() > 1e-9 * spr.max(1.0) {
                continue 'cand;
            }
            let spr = rounded as usize;
            if c.samples.len() % spr != 0 {
                continue 'cand;
            }
            let n = c.samples.len() / spr;
            if *n_records.get_or_insert(n) != n {
                continue 'cand;
            }
            sprs.push(spr);
        }
        return Ok((d, sprs, n_records.unwrap_or(0)));
    }
    Err(EdfError::InvalidRecording(
        "channels do not share an integer number of samples per data record".into(),
    ))
}

/// Serialize to EDF bytes.
///
/// Channels without an explicit physical range get the tightest range that
/// contains their samples and fits the 8-character header field.
pub fn write_edf(rec: &Recording) -> Result<Vec<u8>, EdfError> {
    if rec.channels.is_empty() {
        return Err(EdfError::InvalidRecording("no channels".into()));
    }
    rec.validate().map_err(|e| EdfError::InvalidRecording(e.0))?;
    for c in &rec.channels {
        if c.label.len() > 16 || !c.label.is_ascii() || c.label == ANNOTATION_LABEL {
            return Err(EdfError::InvalidRecording(format!("label '{}' not representable", c.label)));
        }
        if c.physical_unit.len() > 8 || !c.physical_unit.is_ascii() {
            return Err(EdfError::InvalidRecording(format!("unit '{}' too long", c.physical_unit)));
        }
    }
    let (duration, sprs, n_records) = record_layout(rec)?;

    let mut ranges = Vec::with_capacity(rec.channels.len());
    for c in &rec.channels {
        let (lo_txt, hi_txt) = match c.physical_range {
            Some((lo, hi)) => {
                // Judge samples against the declared range, then widen it to
                // the nearest 8-character numbers that still contain it.
                let slack = (hi - lo) * 1e-12;
                if let Some(&v) = c.samples.iter().find(|&&v| !(v >= lo - slack && v <= hi + slack)) {
                    return Err(EdfError::Unrepresentable {
                        channel: c.label.clone(),
                        value: v,
                        lo,
                        hi,
                    });
                }
                let lo_t = fmt_num_outward(lo, 8, true).ok_or_else(|| EdfError::InvalidRecording(format!("physical min {lo}")))?;
                let hi_t = fmt_num_outward(hi, 8, false).ok_or_else(|| EdfError::InvalidRecording(format!("physical max {hi}")))?;
                (lo_t, hi_t)
            }
            None => {
                let mut lo = c.samples.iter().copied().fold(f64::INFINITY, f64::min);
                let mut hi = c.samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if !lo.is_finite() {
                    (lo, hi) = (-1.0, 1.0);
                } else if lo == hi {
                    (lo, hi) = (lo - 1.0, hi + 1.0);
                }
                let bad = || EdfError::InvalidRecording(format!("range of '{}' not representable", c.label));
                (fmt_num_outward(lo, 8, true).ok_or_else(bad)?, fmt_num_outward(hi, 8, false).ok_or_else(bad)?)
            }
        };
        let lo: f64 = lo_txt.parse().expect("formatted number parses");
        let hi: f64 = hi_txt.parse().expect("formatted number parses");
        if hi <= lo {
            return Err(EdfError::InvalidRecording(format!("empty physical range for '{}'", c.label)));
        }
        let slack = (hi - lo) * 1e-12;
        if let Some(&v) = c.samples.iter().find(|&&v| v < lo - slack || v > hi + slack) {
            return Err(EdfError::Unrepresentable {
                channel: c.label.clone(),
                value: v,
                lo,
                hi,
            });
        }
        ranges.push((lo_txt, hi_txt, lo, hi));
    }

    let start = rec.start_time;
    if !(1985..=2084).contains(&start.year()) {
        return Err(EdfError::InvalidRecording(format!("start year {} outside 1985..2084", start.year())));
    }
    let meta = &rec.subject_meta;
    let mut patient = format!("{} {} X X", sanitize(&meta.night_id), meta.gender.letter());
    if let Some(a) = meta.age {
        patient.push_str(&format!(" age:{a}"));
    }
    let site = meta.site.as_deref().map(sanitize).unwrap_or_else(|| "X".into());
    let recording = format!(
        "Startdate {:02}-{}-{} {} X X",
        start.day(),
        MONTHS[start.month0() as usize],
        start.year(),
        site
    );

    let ns = rec.channels.len();
    let mut out = Vec::with_capacity(256 * (ns + 1) + n_records * sprs.iter().sum::<usize>() * 2);
    put(&mut out, "0", 8);
    put(&mut out, &patient, 80);
    put(&mut out, &recording, 80);
    put(
        &mut out,
        &format!("{:02}.{:02}.{:02}", start.day(), start.month(), start.year() % 100),
        8,
    );
    put(
        &mut out,
        &format!("{:02}.{:02}.{:02}", start.hour(), start.minute(), start.second()),
        8,
    );
    put(&mut out, &(256 * (ns + 1)).to_string(), 8);
    put(&mut out, "", 44);
    put(&mut out, &n_records.to_string(), 8);
    put(&mut out, &fmt_num(duration, 8).expect("candidate durations fit"), 8);
    put(&mut out, &ns.to_string(), 4);
    for c in &rec.channels {
        put(&mut out, &c.label, 16);
    }
    for _ in 0..ns {
        put(&mut out, "", 80);
    }
    for c in &rec.channels {
        put(&mut out, &c.physical_unit, 8);
    }
    for r in &ranges {
        put(&mut out, &r.0, 8);
    }
    for r in &ranges {
        put(&mut out, &r.1, 8);
    }
    for _ in 0..ns {
        put(&mut out, &DIGITAL_MIN.to_string(), 8);
    }
    for _ in 0..ns {
        put(&mut out, &DIGITAL_MAX.to_string(), 8);
    }
    for _ in 0..ns {
        put(&mut out, "", 80);
    }
    for s in &sprs {
        put(&mut out, &s.to_string(), 8);
    }
    for _ in 0..ns {
        put(&mut out, "", 32);
    }

    let span = (DIGITAL_MAX - DIGITAL_MIN) as f64;
    for r in 0..n_records {
        for (ci, c) in rec.channels.iter().enumerate() {
            let (_, _, lo, hi) = ranges[ci];
            for &x in &c.samples[r * sprs[ci]..(r + 1) * sprs[ci]] {
                let d = ((x - lo) / (hi - lo) * span + DIGITAL_MIN as f64).round();
                let d = d.clamp(DIGITAL_MIN as f64, DIGITAL_MAX as f64) as i16;
                out.extend_from_slice(&d.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn read_edf_file(path: &Path) -> Result<Recording, EdfError> {
    read_edf(&std::fs::read(path)?)
}

pub fn write_edf_file(rec: &Recording, path: &Path) -> Result<(), EdfError> {
    let bytes = write_edf(rec)?;
    crate::io_util::write_atomic(path, &bytes)?;
    Ok(())
}

/// Physical size of one digital step for a channel range.
pub fn quantization_step(lo: f64, hi: f64) -> f64 {
    (hi - lo) / (DIGITAL_MAX - DIGITAL_MIN) as f64
}

/// 2000-01-01T00:00:00Z, a start time any EDF header can represent.
pub fn default_start() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2000, 1, 1, 0, 0, 0).unwrap()
}
