//! Raw multichannel recordings and the per-subject metadata carried through
//! preprocessing into the loss weights.

use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Gender {
    F,
    M,
    #[default]
    Unknown,
}

impl Gender {
    pub fn letter(self) -> char {
        match self {
            Gender::F => 'F',
            Gender::M => 'M',
            Gender::Unknown => 'X',
        }
    }

    pub fn from_letter(s: &str) -> Gender {
        match s.trim() {
            "F" | "f" => Gender::F,
            "M" | "m" => Gender::M,
            _ => Gender::Unknown,
        }
    }
}

/// Age, gender, acquisition site and subject-night identifier of one night.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectMeta {
    /// Years; `None` when unknown.
    pub age: Option<f64>,
    pub gender: Gender,
    pub site: Option<String>,
    pub night_id: String,
}

impl SubjectMeta {
    pub fn new(night_id: impl Into<String>) -> Self {
        Self {
            age: None,
            gender: Gender::Unknown,
            site: None,
            night_id: night_id.into(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.night_id.trim().is_empty() {
            return Err("night_id is empty".into());
        }
        if let Some(a) = self.age {
            if !(0.0..=120.0).contains(&a) {
                return Err(format!("age {a} outside [0, 120]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub label: String,
    pub samples: Vec<f64>,
    /// Sampling rate in Hz.
    pub rate: f64,
    pub physical_unit: String,
    /// Calibration bounds; chosen from the data on export when absent.
    pub physical_range: Option<(f64, f64)>,
}

impl Channel {
    pub fn new(label: impl Into<String>, rate: f64, samples: Vec<f64>) -> Self {
        Self {
            label: label.into(),
            samples,
            rate,
            physical_unit: String::new(),
            physical_range: None,
        }
    }

    pub fn with_unit(mut self, unit: impl Into<String>) -> Self {
        self.physical_unit = unit.into();
        self
    }

    pub fn with_range(mut self, lo: f64, hi: f64) -> Self {
        self.physical_range = Some((lo, hi));
        self
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.rate
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub channels: Vec<Channel>,
    pub start_time: DateTime<Utc>,
    pub subject_meta: SubjectMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvalidRecording(pub String);

impl fmt::Display for InvalidRecording {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid recording: {}", self.0)
    }
}

impl std::error::Error for InvalidRecording {}

impl Recording {
    /// Longest channel duration in seconds.
    pub fn duration(&self) -> f64 {
        self.channels.iter().map(Channel::duration).fold(0.0, f64::max)
    }

    pub fn channel(&self, label: &str) -> Option<&Channel> {
        self.channels.iter().find(|c| c.label == label)
    }

    pub fn validate(&self) -> Result<(), InvalidRecording> {
        self.subject_meta.validate().map_err(InvalidRecording)?;
        let dur = self.duration();
        for (i, c) in self.channels.iter().enumerate() {
            if !(c.rate > 0.0 && c.rate.is_finite()) {
                return Err(InvalidRecording(format!("channel '{}' has rate {}", c.label, c.rate)));
            }
            if self.channels[..i].iter().any(|o| o.label == c.label) {
                return Err(InvalidRecording(format!("duplicate channel label '{}'", c.label)));
            }
            if (c.samples.len() as f64 - c.rate * dur).abs() > 1.0 {
                return Err(InvalidRecording(format!(
                    "channel '{}' has {} samples, expected {:.1}",
                    c.label,
                    c.samples.len(),
                    c.rate * dur
                )));
            }
            if c.samples.iter().any(|x| !x.is_finite()) {
                return Err(InvalidRecording(format!("channel '{}' has non-finite samples", c.label)));
            }
        }
        Ok(())
    }
}
