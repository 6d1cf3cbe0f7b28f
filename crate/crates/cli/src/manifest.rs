//! Per-run provenance records.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use psgalign::corpus::{corpus_hash, hex_digest};
use psgalign::eval::config_hash;
use serde::{Deserialize, Serialize};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRef {
    pub path: PathBuf,
    pub hash: String,
}

/// Written as `run-<command>.json` in the output directory after every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config_hash: String,
    /// Effective merged configuration.
    pub config: String,
    pub corpus: Option<CorpusRef>,
    /// Extra inputs (checkpoints, stats files) with their SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output file name (relative to the output directory) to SHA-256.
    pub outputs: BTreeMap<String, String>,
    /// `ok`, or the error that ended the run.
    pub status: String,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            version: VERSION.to_string(),
            seed: None,
            config_hash: config_hash(""),
            config: String::new(),
            corpus: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            status: "ok".into(),
        }
    }

    pub fn file_name(command: &str) -> String {
        format!("run-{command}.json")
    }

    pub fn set_config(&mut self, text: &str) {
        self.config = text.to_string();
        self.config_hash = config_hash(text);
    }

    pub fn set_corpus(&mut self, dir: &Path) -> anyhow::Result<()> {
        self.corpus = Some(CorpusRef {
            path: dir.to_path_buf(),
            hash: corpus_hash(dir).with_context(|| format!("hashing corpus {}", dir.display()))?,
        });
        Ok(())
    }

    pub fn add_input(&mut self, path: &Path) -> anyhow::Result<()> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.insert(path.display().to_string(), hex_digest(&bytes));
        Ok(())
    }

    /// Record an output already written under `out`.
    pub fn add_output(&mut self, out: &Path, name: &str) -> anyhow::Result<()> {
        let bytes = std::fs::read(out.join(name)).with_context(|| format!("reading output {name}"))?;
        self.outputs.insert(name.to_string(), hex_digest(&bytes));
        Ok(())
    }

    pub fn save(&self, out: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        psgalign::io_util::write_atomic(&out.join(Self::file_name(&self.command)), text.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Recompute every stored hash; returns one message per mismatch.
    pub fn verify(&self, out: &Path) -> Vec<String> {
        let mut bad = Vec::new();
        if config_hash(&self.config) != self.config_hash {
            bad.push(format!("{}: config hash mismatch", self.command));
        }
        if let Some(c) = &self.corpus {
            match corpus_hash(&c.path) {
                Ok(h) if h == c.hash => {}
                Ok(_) => bad.push(format!("{}: corpus {} changed", self.command, c.path.display())),
                Err(e) => bad.push(format!("{}: corpus {}: {e}", self.command, c.path.display())),
            }
        }
        let files = self.inputs.iter().map(|(p, h)| (PathBuf::from(p), h));
        let outs = self.outputs.iter().map(|(p, h)| (out.join(p), h));
        for (path, h) in files.chain(outs) {
            match std::fs::read(&path) {
                Ok(bytes) if hex_digest(&bytes) == *h => {}
                Ok(_) => bad.push(format!("{}: {} changed", self.command, path.display())),
                Err(e) => bad.push(format!("{}: {}: {e}", self.command, path.display())),
            }
        }
        bad
    }
}
