//! The nine-channel modality pool and the label alias table used to map
//! heterogeneous montage labels onto it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// One of the nine harmonized signal modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Eeg,
    Eog,
    Emg,
    Ecg,
    Airflow,
    Belt,
    Spo2,
    Ibi,
    Resp,
}

/// Canonical rate of the electrophysiological group.
pub const FAST_RATE: f64 = 128.0;
/// Canonical rate of the cardiorespiratory group.
pub const SLOW_RATE: f64 = 4.0;
/// Token (epoch) length in seconds.
pub const EPOCH_SECONDS: f64 = 30.0;

impl Modality {
    pub const ALL: [Modality; 9] = [
        Modality::Eeg,
        Modality::Eog,
        Modality::Emg,
        Modality::Ecg,
        Modality::Airflow,
        Modality::Belt,
        Modality::Spo2,
        Modality::Ibi,
        Modality::Resp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Eeg => "eeg",
            Modality::Eog => "eog",
            Modality::Emg => "emg",
            Modality::Ecg => "ecg",
            Modality::Airflow => "airflow",
            Modality::Belt => "belt",
            Modality::Spo2 => "spo2",
            Modality::Ibi => "ibi",
            Modality::Resp => "resp",
        }
    }

    /// Stable one-byte code used by the corpus file format.
    pub fn code(self) -> u8 {
        Self::ALL.iter().position(|&m| m == self).unwrap() as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn canonical_rate(self) -> f64 {
        match self {
            Modality::Eeg | Modality::Eog | Modality::Emg | Modality::Ecg => FAST_RATE,
            _ => SLOW_RATE,
        }
    }

    /// Samples per 30-second token: 3840 or 120.
    pub fn token_width(self) -> usize {
        (self.canonical_rate() * EPOCH_SECONDS) as usize
    }

    /// IBI and RESP are computed from other channels, never read directly.
    pub fn is_derived(self) -> bool {
        matches!(self, Modality::Ibi | Modality::Resp)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        Self::ALL
            .iter()
            .copied()
            .find(|m| m.name() == lower)
            .ok_or_else(|| format!("unknown modality '{s}'"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AliasRule {
    /// Upper-case pattern.
    pub pattern: String,
    pub modality: Modality,
    /// Whole-label match instead of substring match.
    #[serde(default)]
    pub exact: bool,
}

/// Ordered label → modality rules; the first matching rule wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AliasTable {
    pub rules: Vec<AliasRule>,
}

impl Default for AliasTable {
    fn default() -> Self {
        use Modality::*;
        let contains = [
            ("EOG", Eog),
            ("LOC", Eog),
            ("ROC", Eog),
            ("EMG", Emg),
            ("CHIN", Emg),
            ("ECG", Ecg),
            ("EKG", Ecg),
            ("SPO2", Spo2),
            ("SAO2", Spo2),
            ("OXIM", Spo2),
            ("ABD", Belt),
            ("THOR", Belt),
            ("CHEST", Belt),
            ("BELT", Belt),
            ("EFFORT", Belt),
            ("AIRFLOW", Airflow),
            ("FLOW", Airflow),
            ("NASAL", Airflow),
            ("THERM", Airflow),
            ("PRES", Airflow),
            ("EEG", Eeg),
            ("C3", Eeg),
            ("C4", Eeg),
            ("F3", Eeg),
            ("F4", Eeg),
            ("O1", Eeg),
            ("O2", Eeg),
            ("FPZ", Eeg),
            ("PZ", Eeg),
        ];
        let exact = [("E1", Eog), ("E2", Eog), ("SAT", Spo2), ("IBI", Ibi), ("RESP", Resp)];
        let mut rules: Vec<AliasRule> = exact
            .iter()
            .map(|(p, m)| AliasRule {
                pattern: p.to_string(),
                modality: *m,
                exact: true,
            })
            .collect();
        rules.extend(contains.iter().map(|(p, m)| AliasRule {
            pattern: p.to_string(),
            modality: *m,
            exact: false,
        }));
        Self { rules }
    }
}

impl AliasTable {
    pub fn resolve(&self, label: &str) -> Option<Modality> {
        let up = label.trim().to_ascii_uppercase();
        self.rules
            .iter()
            .find(|r| if r.exact { up == r.pattern } else { up.contains(&r.pattern) })
            .map(|r| r.modality)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn common_montage_labels() {
        let t = AliasTable::default();
        assert_eq!(t.resolve("EEG C4-A1"), Some(Modality::Eeg));
        assert_eq!(t.resolve("C3-M2"), Some(Modality::Eeg));
        assert_eq!(t.resolve("EOG(L)"), Some(Modality::Eog));
        assert_eq!(t.resolve("E1"), Some(Modality::Eog));
        assert_eq!(t.resolve("ECG II"), Some(Modality::Ecg));
        assert_eq!(t.resolve("SaO2"), Some(Modality::Spo2));
        assert_eq!(t.resolve("ABDO RES"), Some(Modality::Belt));
        assert_eq!(t.resolve("NEW AIR"), None);
        assert_eq!(t.resolve("Nasal Pressure"), Some(Modality::Airflow));
        assert_eq!(t.resolve("Position"), None);
    }

    #[test]
    fn codes_and_names_round_trip() {
        for m in Modality::ALL {
            assert_eq!(Modality::from_code(m.code()), Some(m));
            assert_eq!(m.name().parse::<Modality>().unwrap(), m);
        }
        assert_eq!(Modality::Eeg.token_width(), 3840);
        assert_eq!(Modality::Spo2.token_width(), 120);
    }
}
