//! Versioned checkpoint container. Layout, all integers little-endian:
//!
//! ```text
//! magic "OVSK1"
//! u32 config_len, config bytes (canonical key = value text)
//! u64 iteration
//! u32 param_count
//! per parameter:
//!   u32 name_len, name bytes
//!   u32 ndim, u64 × ndim extents
//!   f64 × numel values (LE bit patterns)
//! ```
//!
//! Save → load → save is byte-identical; an unknown magic is an error.

use std::path::Path;

use crate::error::{Error, Result};
use crate::Tensor;

use super::config::RunConfig;
use super::model::Model;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"OVSK1";

pub struct Checkpoint {
    pub config: String,
    pub iteration: u64,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    /// Snapshot the trainable parameters of a model.
    pub fn from_model(model: &Model, iteration: u64) -> Self {
        let params = model
            .trainable_params()
            .into_iter()
            .map(|p| (p.name, p.tensor.shape().to_vec(), p.tensor.to_vec()))
            .collect();
        Checkpoint { config: model.cfg.to_kv_string(), iteration, params }
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::parse(&self.config)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, shape, data) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &e in shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        struct Cursor<'a> {
            bytes: &'a [u8],
            pos: usize,
        }
        impl<'a> Cursor<'a> {
            fn take(&mut self, n: usize) -> Result<&'a [u8]> {
                if self.pos + n > self.bytes.len() {
                    return Err(Error::Format("checkpoint truncated".into()));
                }
                let s = &self.bytes[self.pos..self.pos + n];
                self.pos += n;
                Ok(s)
            }
            fn u32(&mut self) -> Result<u32> {
                Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
            }
            fn u64(&mut self) -> Result<u64> {
                Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
            }
        }
        let mut c = Cursor { bytes, pos: 0 };
        let magic = c.take(5)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Version(String::from_utf8_lossy(magic).into_owned()));
        }
        let config_len = c.u32()? as usize;
        let config = String::from_utf8(c.take(config_len)?.to_vec())
            .map_err(|_| Error::Format("checkpoint config is not UTF-8".into()))?;
        let iteration = c.u64()?;
        let count = c.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = c.u32()? as usize;
            let name = String::from_utf8(c.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("checkpoint parameter name is not UTF-8".into()))?;
            let ndim = c.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(c.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f64::from_bits(c.u64()?));
            }
            params.push((name, shape, data));
        }
        if c.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint payload".into()));
        }
        Ok(Checkpoint { config, iteration, params })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Copy stored values into the model's trainable parameters. Names and
    /// shapes must match the model exactly.
    pub fn apply_to(&self, model: &Model) -> Result<()> {
        let live: Vec<(String, Tensor)> = model
            .trainable_params()
            .into_iter()
            .map(|p| (p.name, p.tensor))
            .collect();
        if live.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, model expects {}",
                self.params.len(),
                live.len()
            )));
        }
        for ((name, shape, data), (live_name, tensor)) in self.params.iter().zip(live) {
            if *name != live_name {
                return Err(Error::Format(format!(
                    "parameter order mismatch: checkpoint {name:?} vs model {live_name:?}"
                )));
            }
            if shape != tensor.shape() {
                return Err(Error::Format(format!(
                    "parameter {name:?} has shape {shape:?}, model expects {:?}",
                    tensor.shape()
                )));
            }
            tensor.set_data(data)?;
        }
        Ok(())
    }
}

/// Rebuild a model from a checkpoint: parse the embedded config, construct,
/// then restore the trainable parameters.
pub fn load_model(path: &Path) -> Result<(Model, Checkpoint)> {
    let ck = Checkpoint::read(path)?;
    let cfg = ck.run_config()?;
    let model = Model::new(&cfg)?;
    ck.apply_to(&model)?;
    Ok((model, ck))
}
