//! Checkpoint persistence.
//!
//! Byte layout, little-endian throughout:
//!
//! ```text
//! magic  "AGAC"                      4 bytes
//! format version                     u32
//! header length                      u64
//! header                             JSON (config snapshot, epoch, RNG
//!                                    state, tensor directory, optimizer
//!                                    metadata)
//! payload                            f64 values: every parameter tensor in
//!                                    directory order, then (when optimizer
//!                                    state is present) first and second
//!                                    moments in the same order
//! content hash                       32 bytes, SHA-256 of all prior bytes
//! ```
//!
//! Loading verifies the hash before trusting anything else.

use crate::config::RunConfig;
use aga_core::model::AgaModel;
use aga_core::train::OptimizerState;
use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const CKPT_MAGIC: &[u8; 4] = b"AGAC";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptMeta {
    step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    run_config: RunConfig,
    next_epoch: usize,
    rng_seed: u64,
    tensors: Vec<TensorMeta>,
    optimizer: Option<OptMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub run_config: RunConfig,
    pub next_epoch: usize,
    pub rng_seed: u64,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
    /// (step, first moments, second moments), parallel to `params`.
    pub optimizer: Option<(u64, Vec<Vec<f64>>, Vec<Vec<f64>>)>,
}

impl Checkpoint {
    pub fn from_model(
        run_config: &RunConfig,
        model: &AgaModel<f64>,
        opt: Option<&OptimizerState>,
        next_epoch: usize,
    ) -> Self {
        let params = model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.tensor.shape.clone(), p.tensor.data.clone()))
            .collect();
        Checkpoint {
            run_config: run_config.clone(),
            next_epoch,
            rng_seed: run_config.seed,
            params,
            optimizer: opt.map(|o| (o.step, o.m.clone(), o.v.clone())),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = Header {
            run_config: self.run_config.clone(),
            next_epoch: self.next_epoch,
            rng_seed: self.rng_seed,
            tensors: self
                .params
                .iter()
                .map(|(name, shape, _)| TensorMeta {
                    name: name.clone(),
                    shape: shape.clone(),
                })
                .collect(),
            optimizer: self.optimizer.as_ref().map(|(step, _, _)| OptMeta { step: *step }),
        };
        let header_json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        for (_, _, data) in &self.params {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some((_, m, v)) = &self.optimizer {
            for buf in m.iter().chain(v.iter()) {
                for x in buf {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        let hash = Sha256::digest(&out);
        out.extend_from_slice(&hash);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 4 + 8 + 32 {
            bail!("checkpoint too short ({} bytes)", bytes.len());
        }
        let (body, stored_hash) = bytes.split_at(bytes.len() - 32);
        let computed = Sha256::digest(body);
        if computed.as_slice() != stored_hash {
            bail!(
                "checkpoint hash mismatch: stored {} vs computed {} (corrupted file)",
                hex(stored_hash),
                hex(&computed)
            );
        }
        if &body[0..4] != CKPT_MAGIC {
            bail!("bad checkpoint magic {:?}", &body[0..4]);
        }
        let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
        if version != CKPT_VERSION {
            bail!("unsupported checkpoint version {version}");
        }
        let header_len = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
        let header_end = 16 + header_len;
        if header_end > body.len() {
            bail!("checkpoint header length {header_len} exceeds file size");
        }
        let header: Header = serde_json::from_slice(&body[16..header_end])
            .context("parsing checkpoint header")?;

        let mut pos = header_end;
        let read_tensor = |numel: usize, pos: &mut usize| -> Result<Vec<f64>> {
            let need = numel * 8;
            if *pos + need > body.len() {
                bail!("checkpoint payload truncated at byte {pos}");
            }
            let out = body[*pos..*pos + need]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            *pos += need;
            Ok(out)
        };

        let mut params = Vec::with_capacity(header.tensors.len());
        for meta in &header.tensors {
            let numel: usize = meta.shape.iter().product();
            let data = read_tensor(numel, &mut pos)?;
            params.push((meta.name.clone(), meta.shape.clone(), data));
        }
        let optimizer = if let Some(om) = &header.optimizer {
            let mut m = Vec::with_capacity(params.len());
            for meta in &header.tensors {
                m.push(read_tensor(meta.shape.iter().product(), &mut pos)?);
            }
            let mut v = Vec::with_capacity(params.len());
            for meta in &header.tensors {
                v.push(read_tensor(meta.shape.iter().product(), &mut pos)?);
            }
            Some((om.step, m, v))
        } else {
            None
        };
        if pos != body.len() {
            bail!("checkpoint has {} trailing payload bytes", body.len() - pos);
        }
        Ok(Checkpoint {
            run_config: header.run_config,
            next_epoch: header.next_epoch,
            rng_seed: header.rng_seed,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .with_context(|| format!("reading checkpoint {}", path.display()))?;
        Self::decode(&bytes)
    }

    /// Hex digest of the encoded checkpoint (the stored content hash).
    pub fn content_hash(&self) -> Result<String> {
        let bytes = self.encode()?;
        Ok(hex(&bytes[bytes.len() - 32..]))
    }

    /// Rebuild the model this checkpoint describes.
    pub fn build_model(&self) -> Result<AgaModel<f64>> {
        let mut model = AgaModel::new(self.run_config.model.clone(), self.run_config.seed)
            .map_err(|e| anyhow!("checkpoint model config: {e}"))?;
        let mut params = model.params_mut();
        if params.len() != self.params.len() {
            bail!(
                "checkpoint stores {} tensors, model has {}",
                self.params.len(),
                params.len()
            );
        }
        for (p, (name, shape, data)) in params.iter_mut().zip(&self.params) {
            if &p.name != name || &p.tensor.shape != shape {
                bail!(
                    "checkpoint tensor '{name}' {shape:?} does not match model tensor '{}' {:?}",
                    p.name,
                    p.tensor.shape
                );
            }
            p.tensor.data = data.clone();
        }
        Ok(model)
    }

    pub fn optimizer_state(&self) -> Option<OptimizerState> {
        self.optimizer.as_ref().map(|(step, m, v)| OptimizerState {
            m: m.clone(),
            v: v.clone(),
            step: *step,
        })
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
