//! Binary checkpoint format.
//!
//! Layout: magic `FXF1` | format version u32 LE | config block (task, d_model,
//! heads, layers, d_ff, classes, max_len, each u32 LE) | tensor count u32 LE |
//! per tensor: name length u16 LE + UTF-8 name + rank u8 + dims u32 LE each +
//! payload as little-endian IEEE-754 f32.
//!
//! Payloads are stored at 32-bit precision; loading therefore yields the
//! f32-rounded values. Saving a loaded model reproduces the file byte for
//! byte.

use super::{EncoderConfig, FaultXformer, ModelConfig, Stage, Task, INPUT_FEATURES, SEQ_LEN};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use std::fs;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 4] = b"FXF1";
const VERSION: u32 = 1;

pub fn save_checkpoint(model: &FaultXformer, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = &model.cfg;
    let task_code: u32 = match cfg.task {
        Task::FaultType => 0,
        Task::FaultLocation => 1,
    };
    for v in [
        task_code,
        cfg.encoder.d_model as u32,
        cfg.encoder.n_heads as u32,
        cfg.encoder.n_layers as u32,
        cfg.encoder.d_ff as u32,
        cfg.n_classes as u32,
        cfg.encoder.max_len as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let names = model.param_names();
    let tensors = model.param_tensors();
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in names.iter().zip(tensors.iter()) {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.rank() as u8);
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file: need {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn load_checkpoint(path: &Path) -> Result<FaultXformer> {
    let bytes = fs::read(path)?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let task = match r.u32()? {
        0 => Task::FaultType,
        1 => Task::FaultLocation,
        other => return Err(Error::Checkpoint(format!("unknown task code {other}"))),
    };
    let d_model = r.u32()? as usize;
    let n_heads = r.u32()? as usize;
    let n_layers = r.u32()? as usize;
    let d_ff = r.u32()? as usize;
    let n_classes = r.u32()? as usize;
    let max_len = r.u32()? as usize;
    let tensor_count = r.u32()? as usize;

    let mut loaded: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::with_capacity(tensor_count);
    for _ in 0..tensor_count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * 4)?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        loaded.push((name, shape, data));
    }

    let has_embed = loaded.iter().any(|(n, _, _)| n == "embed.weight");
    let in_features = if has_embed {
        loaded
            .iter()
            .find(|(n, _, _)| n == "embed.weight")
            .map(|(_, s, _)| s[0])
            .unwrap_or(INPUT_FEATURES)
    } else {
        0
    };
    let cfg = ModelConfig {
        task,
        stage: if has_embed { Stage::FeatureExtractor } else { Stage::TaskHead },
        encoder: EncoderConfig { d_model, n_heads, d_ff, n_layers, max_len: if max_len == 0 { SEQ_LEN } else { max_len } },
        in_features,
        n_classes,
        use_positional_encoding: true,
    };
    let mut model = FaultXformer::init(cfg, 0)?;
    let expected = model.param_names().len();
    if loaded.len() != expected {
        return Err(Error::Checkpoint(format!(
            "tensor count mismatch: file has {}, config implies {}",
            loaded.len(),
            expected
        )));
    }
    for (i, (name, shape, data)) in loaded.into_iter().enumerate() {
        let want_name = &model.param_names()[i];
        if &name != want_name {
            return Err(Error::Checkpoint(format!(
                "unexpected tensor `{name}` at position {i}, expected `{want_name}`"
            )));
        }
        let want_shape = &model.param_tensors()[i].shape;
        if &shape != want_shape {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for tensor `{name}`: file {shape:?}, config {want_shape:?}"
            )));
        }
        model.param_tensors_mut()[i] = Tensor::new(shape, data)?;
    }
    Ok(model)
}
