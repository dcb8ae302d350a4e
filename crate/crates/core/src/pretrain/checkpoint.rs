//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then every tensor's values as little-endian `f64`. The header
//! lists each tensor's name, shape and offset (in values) into the payload,
//! echoes the configuration and records the iteration and RNG scheme.
//! Optimizer moments are stored as `adam.m/<name>` and `adam.v/<name>`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamW, AdamWConfig};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SELFDOC\x01";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Random streams are derived from the seed and the iteration, so the seed
/// and derivation scheme are the whole generator state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub scheme: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub iteration: usize,
    pub config: Config,
    pub rng: RngState,
    pub params: ParamStore,
    pub optimizer: Option<AdamW>,
    /// Free-form description, e.g. which task a head was tuned for.
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    cfg: AdamWConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    iteration: usize,
    config: Config,
    rng: RngState,
    optimizer: Option<OptimizerHeader>,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut named: Vec<(String, &Tensor)> = self.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
        if let Some(opt) = &self.optimizer {
            for ((n, _), (m, v)) in self.params.iter().zip(opt.m.iter().zip(&opt.v)) {
                named.push((format!("adam.m/{n}"), m));
                named.push((format!("adam.v/{n}"), v));
            }
        }
        let mut tensors = Vec::with_capacity(named.len());
        let mut offset = 0;
        for (name, t) in &named {
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.numel();
        }
        let header = Header {
            version: CHECKPOINT_VERSION,
            iteration: self.iteration,
            config: self.config.clone(),
            rng: self.rng.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                cfg: o.cfg,
                step: o.step,
            }),
            meta: self.meta.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &named {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let payload = &bytes[20 + hlen..];
        if !payload.len().is_multiple_of(8) {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();

        let mut params = ParamStore::new();
        let mut moments = std::collections::HashMap::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let data = values
                .get(e.offset..e.offset + n)
                .ok_or_else(|| bad(format!("tensor `{}` runs past the payload", e.name)))?;
            let t = Tensor::new(e.shape, data.to_vec())?;
            if e.name.starts_with("adam.") {
                moments.insert(e.name, t);
            } else {
                params.add(e.name, t)?;
            }
        }
        let optimizer = match header.optimizer {
            Some(h) => {
                let mut take = |kind: &str, name: &str| {
                    moments
                        .remove(&format!("adam.{kind}/{name}"))
                        .ok_or_else(|| bad(format!("missing optimizer moment {kind} for `{name}`")))
                };
                let mut m = Vec::with_capacity(params.len());
                let mut v = Vec::with_capacity(params.len());
                for (name, _) in params.iter() {
                    m.push(take("m", name)?);
                    v.push(take("v", name)?);
                }
                Some(AdamW {
                    cfg: h.cfg,
                    step: h.step,
                    m,
                    v,
                })
            }
            None => None,
        };
        Ok(Self {
            iteration: header.iteration,
            config: header.config,
            rng: header.rng,
            params,
            optimizer,
            meta: header.meta,
        })
    }

    /// Atomic write: temporary file, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_roundtrip_bit_exact() {
        let mut params = ParamStore::new();
        params
            .add("a.w", Tensor::from_fn(&[2, 3], |i| (i as f64).sin() / 3.0))
            .unwrap();
        params
            .add("a.b", Tensor::from_vec(vec![f64::MIN_POSITIVE, -0.0]))
            .unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &params);
        opt.step = 7;
        opt.m[0].data_mut()[4] = 1e-300;
        let ck = Checkpoint {
            iteration: 42,
            config: Config::profile("tiny").unwrap(),
            rng: RngState {
                seed: 9,
                scheme: "test".into(),
            },
            params,
            optimizer: Some(opt.clone()),
            meta: serde_json::json!({"kind": "test"}),
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.iteration, 42);
        assert_eq!(back.params, ck.params);
        assert_eq!(back.optimizer.as_ref(), Some(&opt));
        assert_eq!(back.config, ck.config);
        assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(Checkpoint::from_bytes(b"not a checkpoint at all").is_err());
    }
}
