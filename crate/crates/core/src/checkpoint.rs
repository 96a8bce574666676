//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RVJF" | u32 version = 1 | u64 header_len | header (UTF-8 JSON) | payload | u32 CRC32(payload)
//! ```
//!
//! The header is `{config, phase: {step, lambda}, dtype: "f64", tensors: [{name, shape, offset, byte_len}]}`
//! with offsets relative to the start of the payload. Tensor data is raw
//! little-endian `f64`, so a save/load round trip is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::reparam::DeployedViT;
use crate::tensor::Tensor;
use crate::vit::{ModelConfig, MultiBranchViT};

pub const MAGIC: &[u8; 4] = b"RVJF";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("bad magic bytes {found:?}, expected \"RVJF\"")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported checkpoint version {found}, expected {VERSION}")]
    Version { found: u32 },
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("payload checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed checkpoint header: {0}")]
    Header(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    MultiBranch,
    Deployed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct PhaseMeta {
    pub step: u64,
    pub lambda: f64,
}

/// Contents of the header's `config` object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub kind: ModelKind,
    pub model: ModelConfig,
    /// Training configuration the model came from, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<serde_json::Value>,
    /// Whether LN-affine absorption has been applied and was exact.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub absorbed_exact: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    byte_len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: CheckpointConfig,
    phase: PhaseMeta,
    dtype: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: CheckpointConfig,
    pub phase: PhaseMeta,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_multi_branch(model: &MultiBranchViT, phase: PhaseMeta) -> Self {
        Self {
            config: CheckpointConfig {
                kind: ModelKind::MultiBranch,
                model: model.config.clone(),
                train: None,
                absorbed_exact: None,
            },
            phase,
            tensors: model.tensors(),
        }
    }

    pub fn from_deployed(model: &DeployedViT, phase: PhaseMeta, absorbed_exact: Option<bool>) -> Self {
        Self {
            config: CheckpointConfig {
                kind: ModelKind::Deployed,
                model: model.config.clone(),
                train: None,
                absorbed_exact,
            },
            phase,
            tensors: model.tensors(),
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn multi_branch(&self) -> Result<MultiBranchViT> {
        if self.config.kind != ModelKind::MultiBranch {
            return Err(Error::ModelMismatch("checkpoint holds a deployed model".into()));
        }
        MultiBranchViT::from_tensors(&self.config.model, &self.tensors)
    }

    pub fn deployed(&self) -> Result<DeployedViT> {
        if self.config.kind != ModelKind::Deployed {
            return Err(Error::ModelMismatch("checkpoint holds a multi-branch model".into()));
        }
        DeployedViT::from_tensors(&self.config.model, &self.tensors)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let offset = payload.len() as u64;
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                byte_len: payload.len() as u64 - offset,
            });
        }
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            phase: self.phase,
            dtype: "f64".into(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload.len() + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic {
                found: bytes[..bytes.len().min(4)].to_vec(),
            });
        }
        if bytes.len() < PREAMBLE {
            return Err(CheckpointError::Truncated("file shorter than the fixed preamble".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header_end = PREAMBLE
            .checked_add(header_len)
            .filter(|&e| e.checked_add(4).is_some_and(|t| t <= bytes.len()))
            .ok_or_else(|| CheckpointError::Truncated(format!("header of {header_len} bytes runs past end of file")))?;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        if header.dtype != "f64" {
            return Err(CheckpointError::Header(format!("unsupported dtype {:?}", header.dtype)));
        }
        let payload = &bytes[header_end..bytes.len() - 4];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let len: usize = e.shape.iter().product();
            if e.byte_len != 8 * len as u64 {
                return Err(CheckpointError::Header(format!(
                    "tensor {} has byte_len {} but shape {:?}",
                    e.name, e.byte_len, e.shape
                )));
            }
            let end = e.offset.checked_add(e.byte_len).filter(|&end| end <= payload.len() as u64);
            let Some(end) = end else {
                return Err(CheckpointError::Truncated(format!(
                    "tensor {} spans bytes {}..{} of a {}-byte payload",
                    e.name,
                    e.offset,
                    e.offset.saturating_add(e.byte_len),
                    payload.len()
                )));
            };
            let raw = &payload[e.offset as usize..end as usize];
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&e.shape, data).map_err(|err| CheckpointError::Header(err.to_string()))?;
            tensors.push((e.name.clone(), t));
        }
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        Ok(Self {
            config: header.config,
            phase: header.phase,
            tensors,
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    Ok(Checkpoint::from_bytes(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny() -> MultiBranchViT {
        let cfg = ModelConfig {
            image_size: 4,
            channels: 1,
            patch_size: 2,
            dim: 4,
            heads: 2,
            ffn_hidden: 6,
            deploy_blocks: 1,
            branches: 2,
            num_classes: 3,
            ..ModelConfig::default()
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        MultiBranchViT::init_with_std(&cfg, &mut rng, 0.7).unwrap()
    }

    fn sample_bytes() -> Vec<u8> {
        Checkpoint::from_multi_branch(&tiny(), PhaseMeta { step: 12, lambda: 0.25 })
            .to_bytes()
            .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = tiny();
        let ck = Checkpoint::from_multi_branch(&m, PhaseMeta { step: 3, lambda: 1.0 });
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        let restored = back.multi_branch().unwrap();
        for ((_, a), (_, b)) in m.tensors().iter().zip(restored.tensors().iter()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn preamble_layout() {
        let bytes = sample_bytes();
        assert_eq!(&bytes[..4], b"RVJF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let hl = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hl]).unwrap();
        assert_eq!(header["dtype"], "f64");
        assert_eq!(header["phase"]["step"], 12);
        assert!(header["tensors"][0]["offset"].is_u64());
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = sample_bytes();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::BadMagic { .. })));
    }

    #[test]
    fn wrong_version() {
        let mut bytes = sample_bytes();
        bytes[4] = 9;
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap_err(), CheckpointError::Version { found: 9 });
    }

    #[test]
    fn flipped_payload_byte_fails_checksum() {
        let mut bytes = sample_bytes();
        let n = bytes.len();
        bytes[n - 10] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::Checksum { .. })));
    }

    #[test]
    fn truncated_payload() {
        let bytes = sample_bytes();
        let cut = &bytes[..bytes.len() - 40];
        assert!(matches!(Checkpoint::from_bytes(cut), Err(CheckpointError::Truncated(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..10]), Err(CheckpointError::Truncated(_))));
    }

    #[test]
    fn offset_past_end_is_truncation() {
        let ck = Checkpoint::from_multi_branch(&tiny(), PhaseMeta::default());
        let bytes = ck.to_bytes().unwrap();
        let hl = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hl]).unwrap();
        header["tensors"][0]["offset"] = serde_json::json!(1u64 << 40);
        let new_header = serde_json::to_vec(&header).unwrap();
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(new_header.len() as u64).to_le_bytes());
        out.extend_from_slice(&new_header);
        out.extend_from_slice(&bytes[16 + hl..]);
        assert!(matches!(Checkpoint::from_bytes(&out), Err(CheckpointError::Truncated(_))));
    }

    #[test]
    fn kind_is_enforced() {
        let ck = Checkpoint::from_multi_branch(&tiny(), PhaseMeta::default());
        assert!(ck.deployed().is_err());
        assert!(ck.multi_branch().is_ok());
    }
}
