//! Binary checkpoint format.
//!
//! Layout: `b"MCLP"`, `u32` version, `u64` header length, the JSON header,
//! then every array as little-endian `f64`, concatenated in header order.
//! All integers are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 4] = b"MCLP";
pub const VERSION: u32 = 1;

/// Random state of a run. Every draw is derived from the seed and a
/// counter (step or epoch), so the seed and the next step suffice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    step: u64,
    epoch: u64,
    adam_t: u64,
    rng: RngState,
    arrays: Vec<ArrayEntry>,
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub epoch: u64,
    pub adam_t: u64,
    pub rng: RngState,
    /// Named groups: `params`, `teacher`, `adam.m`, `adam.v`.
    pub groups: BTreeMap<String, ParamStore>,
}

impl Checkpoint {
    pub fn params(&self) -> Result<&ParamStore> {
        self.group("params")
    }

    pub fn group(&self, name: &str) -> Result<&ParamStore> {
        self.groups
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no {name} group")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        for (group, store) in &self.groups {
            for (name, t) in store.iter() {
                arrays.push(ArrayEntry {
                    name: format!("{group}/{name}"),
                    dtype: "f64".into(),
                    shape: t.shape().to_vec(),
                    offset: payload.len() as u64,
                });
                for v in t.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let header = Header {
            config: self.config.clone(),
            step: self.step,
            epoch: self.epoch,
            adam_t: self.adam_t,
            rng: self.rng,
            arrays,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing MCLP magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..body])?;
        header.config.validate()?;
        let payload = &bytes[body..];
        let mut groups: BTreeMap<String, ParamStore> = BTreeMap::new();
        let mut expected_offset = 0u64;
        for a in &header.arrays {
            if a.dtype != "f64" {
                return Err(bad(&format!("unsupported dtype {}", a.dtype)));
            }
            if a.offset != expected_offset {
                return Err(bad("arrays are not contiguous"));
            }
            let n: usize = a.shape.iter().product();
            let start = a.offset as usize;
            let end = start + 8 * n;
            if end > payload.len() {
                return Err(bad(&format!("array {} runs past the end", a.name)));
            }
            let data: Vec<f64> = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(bad(&format!("array {} holds non-finite values", a.name)));
            }
            let (group, name) = a
                .name
                .split_once('/')
                .ok_or_else(|| bad(&format!("array name {} lacks a group", a.name)))?;
            groups
                .entry(group.to_string())
                .or_default()
                .insert(name, Tensor::new(a.shape.clone(), data)?);
            expected_offset = end as u64;
        }
        if expected_offset as usize != payload.len() {
            return Err(bad("trailing bytes after the last array"));
        }
        Ok(Self {
            config: header.config,
            step: header.step,
            epoch: header.epoch,
            adam_t: header.adam_t,
            rng: header.rng,
            groups,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Human-readable summary for `inspect-ckpt`.
    pub fn summary(&self) -> serde_json::Value {
        let groups: BTreeMap<&str, serde_json::Value> = self
            .groups
            .iter()
            .map(|(k, s)| {
                (
                    k.as_str(),
                    serde_json::json!({"tensors": s.len(), "scalars": s.num_scalars()}),
                )
            })
            .collect();
        serde_json::json!({
            "version": VERSION,
            "objective": self.config.objective,
            "step": self.step,
            "epoch": self.epoch,
            "seed": self.rng.seed,
            "groups": groups,
            "config": self.config,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut p = ParamStore::new();
        p.insert("a.weight", Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap());
        p.insert("log_sigma", Tensor::scalar(0.07f64.ln()));
        let mut groups = BTreeMap::new();
        groups.insert("params".to_string(), p);
        Checkpoint {
            config: TrainConfig::default(),
            step: 7,
            epoch: 1,
            adam_t: 7,
            rng: RngState { seed: 3, next_step: 7 },
            groups,
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let b1 = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&b1).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), b1);
        assert_eq!(&b1[..4], b"MCLP");
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let b = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = b;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
