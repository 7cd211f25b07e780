//! Checkpoint file (`GMCK`, version 1), little-endian:
//! ```text
//! magic "GMCK" | u32 version | u32 meta_len | meta_len bytes of JSON
//! | u32 n_tensors | n_tensors × (u32 name_len, name, u32 rank, rank×u32 dims, f64 payload)
//! ```
//! Model parameters come first in model order, then the Adam moments as
//! `optim.m.<name>` and `optim.v.<name>`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{dim_u32, put_f64s, put_u32, ByteReader};
use crate::error::{Error, Result};
use crate::model::{GmailModel, ModelDims, RealFlowPolicy};
use crate::numerics::Tensor;
use crate::train::config::TrainConfig;
use crate::train::optim::OptimizerState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const MOMENT_M: &str = "optim.m.";
const MOMENT_V: &str = "optim.v.";

/// Last completed training phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Init,
    Pretrained,
    Aligned,
    Downstream,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Init => "init",
            Phase::Pretrained => "pretrained",
            Phase::Aligned => "aligned",
            Phase::Downstream => "downstream",
        })
    }
}

/// A training stage: A pretrains, B aligns, C fits the downstream head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    A,
    B,
    C,
}

impl Stage {
    pub fn tag(self) -> char {
        match self {
            Stage::A => 'A',
            Stage::B => 'B',
            Stage::C => 'C',
        }
    }

    pub(crate) fn index(self) -> u64 {
        match self {
            Stage::A => 0,
            Stage::B => 1,
            Stage::C => 2,
        }
    }

    /// Phase reached once the stage completes.
    pub fn completes(self) -> Phase {
        match self {
            Stage::A => Phase::Pretrained,
            Stage::B => Phase::Aligned,
            Stage::C => Phase::Downstream,
        }
    }
}

/// A stage stopped before its last step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub stage: Stage,
    /// Number of steps already taken in the stage.
    pub step: usize,
}

/// Where a checkpoint came from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    /// Fingerprint of the checkpoint written when pretraining finished.
    pub phase_a_fingerprint: Option<String>,
    /// Stages completed, in order.
    pub stages: Vec<Stage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub phase: Phase,
    pub model: GmailModel,
    pub optimizer: OptimizerState,
    pub config: TrainConfig,
    pub progress: Option<Progress>,
    pub lineage: Lineage,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    phase: Phase,
    dims: ModelDims,
    real_flow_policy: RealFlowPolicy,
    config: TrainConfig,
    progress: Option<Progress>,
    optimizer_step: u64,
    lineage: Lineage,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            phase: self.phase,
            dims: self.model.dims.clone(),
            real_flow_policy: self.model.image.real_flow_policy,
            config: self.config.clone(),
            progress: self.progress,
            optimizer_step: self.optimizer.step,
            lineage: self.lineage.clone(),
        };
        let json = serde_json::to_vec(&meta)?;

        let mut tensors: Vec<(String, &Tensor)> = self.model.named_params();
        for (name, t) in &self.optimizer.first {
            tensors.push((format!("{MOMENT_M}{name}"), t));
        }
        for (name, t) in &self.optimizer.second {
            tensors.push((format!("{MOMENT_V}{name}"), t));
        }

        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, dim_u32(json.len(), "meta length")?);
        out.extend_from_slice(&json);
        put_u32(&mut out, dim_u32(tensors.len(), "tensor count")?);
        for (name, t) in tensors {
            put_u32(&mut out, dim_u32(name.len(), "name length")?);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, dim_u32(t.shape().len(), "rank")?);
            for &d in t.shape() {
                put_u32(&mut out, dim_u32(d, "dimension")?);
            }
            put_f64s(&mut out, t.data());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let meta_len = r.u32()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;

        let n = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        let mut order = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let len = r.u32()? as usize;
            let at = r.offset();
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format(format!("tensor name at byte offset {at} is not UTF-8")))?
                .to_owned();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
            let data = r.f64s(numel)?;
            let t = Tensor::new(shape, data)?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Format(format!("tensor {name} appears twice")));
            }
            order.push(name);
        }
        r.finish()?;

        // Rebuild the skeleton, then overwrite every parameter by name.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = GmailModel::init(meta.dims, meta.real_flow_policy, &mut rng)?;
        let mut expected = 0;
        for (name, slot) in model.named_params_mut() {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            if order.get(expected) != Some(&name) {
                return Err(Error::Format(format!("parameter {name} is out of order")));
            }
            expected += 1;
            *slot = t;
        }

        let mut optimizer = OptimizerState {
            step: meta.optimizer_step,
            ..Default::default()
        };
        for (name, t) in tensors {
            if let Some(p) = name.strip_prefix(MOMENT_M) {
                optimizer.first.insert(p.to_owned(), t);
            } else if let Some(p) = name.strip_prefix(MOMENT_V) {
                optimizer.second.insert(p.to_owned(), t);
            } else {
                return Err(Error::Format(format!("unknown tensor {name}")));
            }
        }

        Ok(Self {
            phase: meta.phase,
            model,
            optimizer,
            config: meta.config,
            progress: meta.progress,
            lineage: meta.lineage,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    /// SHA-256 of the encoded checkpoint, hex, first 16 characters.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(fingerprint_bytes(&self.encode()?))
    }
}

pub fn fingerprint_bytes(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    hex::encode(&digest[..8])
}
