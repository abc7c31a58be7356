//! Binary checkpoint format.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "TLM1"
//! 4       4     layers   (u32 LE)
//! 8       4     dim      (u32 LE)
//! 12      4     heads    (u32 LE)
//! 16      4     context  (u32 LE)
//! 20      4     vocab    (u32 LE)
//! 24      4     role     (u32 LE, 0 = teacher, 1 = student)
//! 28      8*n   parameters, f64 LE, tensors in canonical order
//! ```
//!
//! The canonical tensor order is [`ModelConfig::param_shapes`]; each tensor is
//! written row-major. The file length must equal `28 + 8 * param_count`.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{LmError, ModelConfig, ModelRole, Result, TinyLM};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"TLM1";
const HEADER_LEN: usize = 28;

impl TinyLM {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = self.config();
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * c.param_count());
        out.extend_from_slice(MAGIC);
        let role = match self.role() {
            ModelRole::Teacher => 0u32,
            ModelRole::Student => 1u32,
        };
        for v in [c.layers, c.dim, c.heads, c.context, c.vocab] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&role.to_le_bytes());
        for t in self.params() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(LmError::Checkpoint("bad magic or truncated header".into()));
        }
        let word = |i: usize| {
            let o = 4 + 4 * i;
            u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4-byte slice")) as usize
        };
        let config = ModelConfig {
            layers: word(0),
            dim: word(1),
            heads: word(2),
            context: word(3),
            vocab: word(4),
        };
        config.validate()?;
        let role = match word(5) {
            0 => ModelRole::Teacher,
            1 => ModelRole::Student,
            r => return Err(LmError::Checkpoint(format!("unknown role tag {r}"))),
        };
        let expected = HEADER_LEN + 8 * config.param_count();
        if bytes.len() != expected {
            return Err(LmError::Checkpoint(format!(
                "length {} does not match expected {expected}",
                bytes.len()
            )));
        }
        let mut offset = HEADER_LEN;
        let mut params = Vec::new();
        for shape in config.param_shapes() {
            let n: usize = shape.iter().product();
            let data = bytes[offset..offset + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            offset += 8 * n;
            params.push(Tensor::new(shape, data)?);
        }
        TinyLM::from_params(config, role, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the checkpoint bytes, hex encoded.
    pub fn content_hash(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
