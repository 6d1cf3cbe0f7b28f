//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "S2VK"  u16 version
//! u32 n_params   { u16 name_len, name, u8 rank, u32 dims[rank], f64 data[..] }*
//! u8 has_optimizer [optimizer blob]
//! u64 rng_seed  u64 rng_step
//! u32 config_len  config text (UTF-8)
//! [32-byte SHA-256 of everything above]
//! ```
//!
//! The optimizer blob stores the step, the AdamW hyper-parameters and the
//! per-parameter moment buffers keyed by parameter name.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::optim::{AdamWConfig, Moments, OptimizerState};
use super::params::ParamStore;
use super::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"S2VK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint or unsupported version (magic {magic:?}, version {version})")]
    VersionMismatch { magic: [u8; 4], version: u16 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Seed and step from which every random stream of a run is derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<OptimizerState>,
    pub rng: RngState,
    pub config: String,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, optimizer: Option<OptimizerState>, rng: RngState, config: String) -> Self {
        Self {
            params: store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect(),
            optimizer,
            rng,
            config,
        }
    }

    /// Copy stored values into `store` for every matching name; returns the names
    /// present in `store` but absent from the checkpoint.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<Vec<String>, CheckpointError> {
        let mut seen = std::collections::HashSet::new();
        for (name, value) in &self.params {
            if let Some(id) = store.id(name) {
                if store.value(id).shape() != value.shape() {
                    return Err(CheckpointError::Corrupt(format!(
                        "shape of {name}: checkpoint {:?}, model {:?}",
                        value.shape(),
                        store.value(id).shape()
                    )));
                }
                store.set_value(id, value.clone());
                seen.insert(name.as_str());
            }
        }
        Ok(store
            .iter()
            .filter(|(_, n, _)| !seen.contains(n))
            .map(|(_, n, _)| n.to_string())
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(CHECKPOINT_MAGIC);
        w.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_u32(&mut w, self.params.len() as u32);
        for (name, t) in &self.params {
            put_str16(&mut w, name);
            w.push(t.rank() as u8);
            for &d in t.shape() {
                put_u32(&mut w, d as u32);
            }
            put_f64s(&mut w, t.data());
        }
        match &self.optimizer {
            None => w.push(0),
            Some(opt) => {
                w.push(1);
                write_optimizer(&mut w, opt);
            }
        }
        w.extend_from_slice(&self.rng.seed.to_le_bytes());
        w.extend_from_slice(&self.rng.step.to_le_bytes());
        put_u32(&mut w, self.config.len() as u32);
        w.extend_from_slice(self.config.as_bytes());
        let digest = Sha256::digest(&w);
        w.extend_from_slice(&digest);
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 6 {
            return Err(CheckpointError::Corrupt("file shorter than header".into()));
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if &magic != CHECKPOINT_MAGIC || version != CHECKPOINT_VERSION {
            return Err(CheckpointError::VersionMismatch { magic, version });
        }
        if bytes.len() < 6 + 32 {
            return Err(CheckpointError::Corrupt("missing checksum".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CheckpointError::Corrupt("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 6 };
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.str16()?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let len: usize = shape.iter().product();
            let data = r.f64s(len)?;
            let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            params.push((name, t));
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => Some(read_optimizer(&mut r)?),
            x => return Err(CheckpointError::Corrupt(format!("bad optimizer flag {x}"))),
        };
        let rng = RngState {
            seed: r.u64()?,
            step: r.u64()?,
        };
        let clen = r.u32()? as usize;
        let config = String::from_utf8(r.take(clen)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("config is not UTF-8".into()))?;
        if r.pos != body.len() {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        Ok(Self {
            params,
            optimizer,
            rng,
            config,
        })
    }

    /// Write atomically via a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        crate::io_util::write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn write_optimizer(w: &mut Vec<u8>, opt: &OptimizerState) {
    let c = &opt.config;
    w.extend_from_slice(&opt.step.to_le_bytes());
    put_f64s(w, &[c.peak_lr, c.warmup_fraction]);
    w.extend_from_slice(&c.total_steps.to_le_bytes());
    put_f64s(w, &[c.betas.0, c.betas.1, c.eps, c.weight_decay]);
    put_u32(w, opt.moments.len() as u32);
    for (name, m) in &opt.moments {
        put_str16(w, name);
        w.extend_from_slice(&m.t.to_le_bytes());
        put_u32(w, m.m.len() as u32);
        put_f64s(w, &m.m);
        put_f64s(w, &m.v);
    }
}

fn read_optimizer(r: &mut Reader<'_>) -> Result<OptimizerState, CheckpointError> {
    let step = r.u64()?;
    let lr = r.f64s(2)?;
    let total_steps = r.u64()?;
    let rest = r.f64s(4)?;
    let config = AdamWConfig {
        peak_lr: lr[0],
        warmup_fraction: lr[1],
        total_steps,
        betas: (rest[0], rest[1]),
        eps: rest[2],
        weight_decay: rest[3],
    };
    let n = r.u32()? as usize;
    let mut moments = BTreeMap::new();
    for _ in 0..n {
        let name = r.str16()?;
        let t = r.u64()?;
        let len = r.u32()? as usize;
        let m = r.f64s(len)?;
        let v = r.f64s(len)?;
        moments.insert(name, Moments { t, m, v });
    }
    Ok(OptimizerState { config, step, moments })
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_str16(w: &mut Vec<u8>, s: &str) {
    w.extend_from_slice(&(s.len() as u16).to_le_bytes());
    w.extend_from_slice(s.as_bytes());
}

fn put_f64s(w: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        w.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Corrupt("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str16(&mut self) -> Result<String, CheckpointError> {
        let n = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Corrupt("name is not UTF-8".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| CheckpointError::Corrupt("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut store = ParamStore::new();
        store.insert("a.w", Tensor::new(&[2, 2], vec![1.0, -0.5, f64::MIN_POSITIVE, 3.25]).unwrap(), true);
        store.insert("ln.g", Tensor::from_vec(vec![1.0; 3]), false);
        let mut opt = OptimizerState::new(AdamWConfig::default());
        opt.step = 7;
        opt.moments.insert(
            "a.w".into(),
            Moments {
                t: 7,
                m: vec![0.1, 0.2, 0.3, 0.4],
                v: vec![1e-3; 4],
            },
        );
        Checkpoint::from_store(&store, Some(opt), RngState { seed: 7, step: 7 }, "[model]\nx = 1\n".into())
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(ck, back);
    }

    #[test]
    fn truncation_is_corrupt() {
        let bytes = sample().to_bytes();
        for cut in [7, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(CheckpointError::Corrupt(_))));
        }
    }

    #[test]
    fn wrong_magic_is_version_mismatch() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::VersionMismatch { .. })));
    }
}
