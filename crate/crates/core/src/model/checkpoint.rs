//! Checkpoint container:
//!
//! ```text
//! magic   "KISTCKPT"            8 bytes
//! version u32 LE
//! header  u32 LE length + JSON {config, step}
//! layers  per layer: u32 LE count + f32 LE weights, u32 LE count + f32 LE biases
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ConvParams, Model, ModelConfig};
use crate::error::{KistError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"KISTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(KistError::Checkpoint("truncated file".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32_blob(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()? as usize;
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect())
    }
}

fn push_blob(out: &mut Vec<u8>, values: &[f64]) {
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

impl Model {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            step: self.step,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + self.parameter_count() * 4 + self.layers.len() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for l in &self.layers {
            push_blob(&mut out, &l.weights);
            push_blob(&mut out, &l.bias);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(KistError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(KistError::Checkpoint(format!("unsupported version {version}")));
        }
        let header_len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)?;
        header.config.validate()?;
        let n_layers = super::layer_specs(&header.config).len();
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let weights = r.f32_blob()?;
            let bias = r.f32_blob()?;
            layers.push(ConvParams { weights, bias });
        }
        if r.pos != bytes.len() {
            return Err(KistError::Checkpoint("trailing bytes".into()));
        }
        Model::from_parts(header.config, layers, header.step)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
