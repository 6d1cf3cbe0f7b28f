//! Prepared-night corpus: the binary `S2VC` container, the TOML manifest with
//! splits and modality presence, and the JSON label sidecar.
//!
//! `S2VC` layout (little-endian):
//!
//! ```text
//! "S2VC"  u16 version  u32 n_nights
//! per night:
//!   u32 meta_len  meta (UTF-8 "key=value\n" lines)
//!   u8 n_mod  { u8 modality code, u32 rows, u32 cols }*
//!   f32 matrices, in table order, row-major
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::modality::Modality;
use crate::prep::{EpochMatrix, PreparedNight};
use crate::recording::{Gender, SubjectMeta};

pub const CORPUS_MAGIC: &[u8; 4] = b"S2VC";
pub const CORPUS_VERSION: u16 = 1;

pub const CORPUS_FILE: &str = "corpus.s2vc";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const LABELS_FILE: &str = "labels.json";
pub const STATS_FILE: &str = "stats.toml";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("not a corpus file or unsupported version (magic {magic:?}, version {version})")]
    VersionMismatch { magic: [u8; 4], version: u16 },
    #[error("corrupt corpus: {0}")]
    Corrupt(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn corrupt(msg: impl Into<String>) -> CorpusError {
    CorpusError::Corrupt(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// Unlabeled pre-training nights.
    Pretrain,
    /// Labeled nights for training downstream heads.
    Finetune,
    /// Held-out evaluation nights.
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Pretrain => "pretrain",
            Split::Finetune => "finetune",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pretrain" => Ok(Split::Pretrain),
            "finetune" => Ok(Split::Finetune),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split '{s}'")),
        }
    }
}

fn meta_text(m: &SubjectMeta) -> String {
    let mut s = format!("night_id={}\n", m.night_id);
    if let Some(a) = m.age {
        s.push_str(&format!("age={a}\n"));
    }
    s.push_str(&format!("gender={}\n", m.gender.letter()));
    if let Some(site) = &m.site {
        s.push_str(&format!("site={site}\n"));
    }
    s
}

fn parse_meta(text: &str) -> Result<SubjectMeta, CorpusError> {
    let mut meta = SubjectMeta::new("");
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| corrupt(format!("metadata line '{line}'")))?;
        match k {
            "night_id" => meta.night_id = v.to_string(),
            "age" => meta.age = Some(v.parse().map_err(|_| corrupt(format!("age '{v}'")))?),
            "gender" => meta.gender = Gender::from_letter(v),
            "site" => meta.site = Some(v.to_string()),
            _ => log::debug!("ignoring metadata key '{k}'"),
        }
    }
    meta.validate().map_err(corrupt)?;
    Ok(meta)
}

pub fn encode_nights(nights: &[PreparedNight]) -> Vec<u8> {
    let mut w = Vec::new();
    w.extend_from_slice(CORPUS_MAGIC);
    w.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
    w.extend_from_slice(&(nights.len() as u32).to_le_bytes());
    for n in nights {
        let meta = meta_text(&n.meta);
        w.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        w.extend_from_slice(meta.as_bytes());
        w.push(n.epochs.len() as u8);
        for (m, mat) in &n.epochs {
            w.push(m.code());
            w.extend_from_slice(&(mat.rows as u32).to_le_bytes());
            w.extend_from_slice(&(mat.cols as u32).to_le_bytes());
        }
        for mat in n.epochs.values() {
            for v in &mat.data {
                w.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    w
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CorpusError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| corrupt("unexpected end of file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CorpusError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CorpusError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_nights(bytes: &[u8]) -> Result<Vec<PreparedNight>, CorpusError> {
    if bytes.len() < 6 {
        return Err(corrupt("file shorter than header"));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if &magic != CORPUS_MAGIC || version != CORPUS_VERSION {
        return Err(CorpusError::VersionMismatch { magic, version });
    }
    let mut r = Reader { buf: bytes, pos: 6 };
    let n = r.u32()? as usize;
    let mut nights = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| corrupt("metadata is not UTF-8"))?;
        let meta = parse_meta(text)?;
        let k = r.u8()? as usize;
        let mut table = Vec::with_capacity(k);
        for _ in 0..k {
            let code = r.u8()?;
            let m = Modality::from_code(code).ok_or_else(|| corrupt(format!("modality code {code}")))?;
            table.push((m, r.u32()? as usize, r.u32()? as usize));
        }
        let mut epochs = BTreeMap::new();
        for (m, rows, cols) in table {
            let count = rows.checked_mul(cols).ok_or_else(|| corrupt("matrix size overflow"))?;
            let raw = r.take(count.checked_mul(4).ok_or_else(|| corrupt("matrix size overflow"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if epochs.insert(m, EpochMatrix { rows, cols, data }).is_some() {
                return Err(corrupt(format!("duplicate modality {m}")));
            }
        }
        let night = PreparedNight { epochs, meta };
        night.validate().map_err(corrupt)?;
        nights.push(night);
    }
    if r.pos != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(nights)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub modalities: Vec<Modality>,
    pub epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub site: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default)]
    pub night: Vec<ManifestEntry>,
}

/// Per-night annotations: per-epoch stage codes (0..5 for W, N1, N2, N3, REM)
/// and an optional night-level binary target.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NightLabels {
    pub stages: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<u8>,
}

pub type Labels = BTreeMap<String, NightLabels>;

/// Nights in file order together with their split and labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub nights: Vec<PreparedNight>,
    pub splits: Vec<Split>,
    pub labels: Labels,
}

impl Corpus {
    pub fn new(nights: Vec<PreparedNight>, splits: Vec<Split>, labels: Labels) -> Self {
        assert_eq!(nights.len(), splits.len(), "one split per night");
        Self { nights, splits, labels }
    }

    pub fn len(&self) -> usize {
        self.nights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nights.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.nights.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn labels_of(&self, i: usize) -> Option<&NightLabels> {
        self.labels.get(&self.nights[i].meta.night_id)
    }

    /// Modalities present in at least one night.
    pub fn modalities(&self) -> Vec<Modality> {
        let mut all: Vec<Modality> = self.nights.iter().flat_map(|n| n.modality_set()).collect();
        all.sort();
        all.dedup();
        all
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            night: self
                .nights
                .iter()
                .zip(&self.splits)
                .map(|(n, &split)| ManifestEntry {
                    id: n.meta.night_id.clone(),
                    split,
                    modalities: n.modality_set(),
                    epochs: n.n_epochs(),
                    site: n.meta.site.clone(),
                })
                .collect(),
        }
    }

    /// Write `corpus.s2vc`, `manifest.toml` and `labels.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), CorpusError> {
        std::fs::create_dir_all(dir)?;
        crate::io_util::write_atomic(&dir.join(CORPUS_FILE), &encode_nights(&self.nights))?;
        let manifest = toml::to_string(&self.manifest()).map_err(|e| CorpusError::Manifest(e.to_string()))?;
        crate::io_util::write_atomic(&dir.join(MANIFEST_FILE), manifest.as_bytes())?;
        let labels = serde_json::to_string_pretty(&self.labels).map_err(|e| CorpusError::Manifest(e.to_string()))?;
        crate::io_util::write_atomic(&dir.join(LABELS_FILE), labels.as_bytes())?;
        Ok(())
    }

    /// Load a corpus directory; the label sidecar is optional.
    pub fn load(dir: &Path) -> Result<Self, CorpusError> {
        let nights = decode_nights(&std::fs::read(dir.join(CORPUS_FILE))?)?;
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let manifest: Manifest = toml::from_str(&text).map_err(|e| CorpusError::Manifest(e.to_string()))?;
        if manifest.night.len() != nights.len() {
            return Err(CorpusError::Manifest(format!(
                "{} manifest entries for {} nights",
                manifest.night.len(),
                nights.len()
            )));
        }
        for (e, n) in manifest.night.iter().zip(&nights) {
            if e.id != n.meta.night_id || e.modalities != n.modality_set() || e.epochs != n.n_epochs() {
                return Err(CorpusError::Manifest(format!("entry '{}' does not match the corpus file", e.id)));
            }
        }
        let labels_path = dir.join(LABELS_FILE);
        let labels = if labels_path.exists() {
            serde_json::from_str(&std::fs::read_to_string(labels_path)?)
                .map_err(|e| CorpusError::Manifest(format!("labels: {e}")))?
        } else {
            Labels::new()
        };
        let splits = manifest.night.iter().map(|e| e.split).collect();
        Ok(Self { nights, splits, labels })
    }
}

/// SHA-256 hex digest of a corpus directory's binary file.
pub fn corpus_hash(dir: &Path) -> Result<String, CorpusError> {
    let bytes = std::fs::read(dir.join(CORPUS_FILE))?;
    Ok(hex_digest(&bytes))
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Deterministic split for a grouping key (typically a subject id): a uniform
/// draw keyed by `(seed, key)` against cumulative `pretrain` / `finetune` fractions.
pub fn split_for_key(key: &str, seed: u64, pretrain: f64, finetune: f64) -> Split {
    let u = (crate::rng::derive_seed(seed, &[crate::rng::tag(key)]) >> 11) as f64 / (1u64 << 53) as f64;
    if u < pretrain {
        Split::Pretrain
    } else if u < pretrain + finetune {
        Split::Finetune
    } else {
        Split::Test
    }
}
