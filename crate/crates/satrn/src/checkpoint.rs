//! Binary checkpoint format.
//!
//! Layout (little-endian): magic `SATRN1\n`; u32 tensor count; per tensor a
//! u16 name length, the UTF-8 name, u8 ndim, u32 dims, then raw f32 data;
//! a UTF-8 config block of key=value lines; finally the u64 training step.
//! Values are stored as f32 regardless of compute precision — parameters are
//! kept f32-representable, so the round trip is bit-exact.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 7] = b"SATRN1\n";

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    step: u64,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize || tensor.rank() > u8::MAX as usize {
            return Err(Error::Usage(format!("tensor {name:?} does not fit the format")));
        }
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(tensor.rank() as u8);
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    buf.extend_from_slice(cfg.to_kv().as_bytes());
    buf.extend_from_slice(&step.to_le_bytes());
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Exact byte size a checkpoint of these parameters will occupy.
pub fn checkpoint_size<T: Scalar>(params: &ParamSet<T>, cfg: &ModelConfig) -> usize {
    let tensors: usize = params
        .iter()
        .map(|(name, t)| 2 + name.len() + 1 + 4 * t.rank() + 4 * t.numel())
        .sum();
    MAGIC.len() + 4 + tensors + cfg.to_kv().len() + 8
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "truncated at byte {} (wanted {n} more of {})",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Raw parse: named tensors, config, step. Nothing is instantiated yet.
pub fn read_checkpoint<T: Scalar>(
    path: &Path,
) -> Result<(HashMap<String, Tensor<T>>, ModelConfig, u64)> {
    let bytes = fs::read(path)?;
    if bytes.len() < MAGIC.len() + 4 + 8 {
        return Err(Error::CorruptCheckpoint(format!(
            "{}: file too short ({} bytes)",
            path.display(),
            bytes.len()
        )));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::CorruptCheckpoint(format!(
            "{}: bad magic bytes",
            path.display()
        )));
    }
    let mut r = Reader { bytes: &bytes, pos: MAGIC.len() };
    let count = r.u32()? as usize;
    let mut tensors = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(4 * numel)?;
        let data: Vec<T> = raw
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::CorruptCheckpoint(format!("tensor {name:?}: {e}")))?;
        if tensors.insert(name.clone(), tensor).is_some() {
            return Err(Error::CorruptCheckpoint(format!("duplicate tensor {name:?}")));
        }
    }
    if bytes.len() < r.pos + 8 {
        return Err(Error::CorruptCheckpoint("missing step footer".into()));
    }
    let config_block = std::str::from_utf8(&bytes[r.pos..bytes.len() - 8])
        .map_err(|_| Error::CorruptCheckpoint("config block is not UTF-8".into()))?;
    let cfg = ModelConfig::from_kv(config_block)
        .map_err(|e| Error::CorruptCheckpoint(format!("config block: {e}")))?;
    let step = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    Ok((tensors, cfg, step))
}

/// Load and instantiate a model, verifying every tensor against the config's
/// architecture.
pub fn load_model<T: Scalar>(path: &Path) -> Result<(Model<T>, u64)> {
    let (tensors, cfg, step) = read_checkpoint::<T>(path)?;
    let model = Model::from_tensors(cfg, tensors)?;
    Ok((model, step))
}
