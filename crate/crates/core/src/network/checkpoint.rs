//! Binary checkpoint container.
//!
//! ```text
//! magic        4 bytes  "DQN1"
//! version      u16
//! config_hash  32 bytes SHA-256 of the layer kinds and widths
//! layer_count  u32
//! per layer:
//!   kind tag   u8
//!   fan_in     u32
//!   fan_out    u32
//!   tensors    u8
//!   per tensor: rank u8, extents u32 × rank, f32 payload
//! ```
//!
//! All integers and floats are little-endian. Parameters round-trip
//! bit-exactly.

use std::fs;
use std::path::Path;

use super::{BatchNorm, Dense, Layer, LayerKind, Model};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DQN1";
pub const CHECKPOINT_VERSION: u16 = 1;

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend((d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

/// Serializes a model to checkpoint bytes.
pub fn write_checkpoint(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(CHECKPOINT_MAGIC);
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    out.extend(model.config_hash());
    out.extend((model.layers().len() as u32).to_le_bytes());
    for layer in model.layers() {
        let spec = layer.spec();
        out.push(spec.kind.tag());
        out.extend((spec.fan_in as u32).to_le_bytes());
        out.extend((spec.fan_out as u32).to_le_bytes());
        let tensors = layer.params();
        out.push(tensors.len() as u8);
        for t in tensors {
            put_tensor(&mut out, t);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u8("tensor rank")? as usize;
        let shape = (0..rank)
            .map(|_| self.u32("tensor extent").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n * 4, "tensor payload")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

/// Parses checkpoint bytes, verifying magic, version and config hash.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(CHECKPOINT_MAGIC)
        )));
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, this reader handles version {CHECKPOINT_VERSION}"
        )));
    }
    let stored_hash: [u8; 32] = r.take(32, "config hash")?.try_into().unwrap();
    let count = r.u32("layer count")? as usize;
    let mut layers = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let tag = r.u8("layer kind")?;
        let kind = LayerKind::from_tag(tag)
            .ok_or_else(|| Error::Checkpoint(format!("layer {i}: unknown kind tag {tag}")))?;
        let fan_in = r.u32("fan_in")? as usize;
        let fan_out = r.u32("fan_out")? as usize;
        let n = r.u8("tensor count")? as usize;
        let tensors = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        let bad = |why: &str| Error::Checkpoint(format!("layer {i} ({kind}): {why}"));
        let layer = match kind {
            LayerKind::Dense | LayerKind::BinaryDense => {
                let [weight, bias]: [Tensor; 2] = tensors.try_into().map_err(|_| bad("expected 2 tensors"))?;
                if weight.shape() != [fan_out, fan_in] || bias.shape() != [fan_out] {
                    return Err(bad("tensor shapes disagree with fan_in/fan_out"));
                }
                Layer::Dense(Dense {
                    weight,
                    bias,
                    binary: kind == LayerKind::BinaryDense,
                })
            }
            LayerKind::BatchNorm => {
                let [gamma, beta, running_mean, running_var]: [Tensor; 4] =
                    tensors.try_into().map_err(|_| bad("expected 4 tensors"))?;
                if [&gamma, &beta, &running_mean, &running_var].iter().any(|t| t.shape() != [fan_in]) {
                    return Err(bad("tensor shapes disagree with width"));
                }
                Layer::BatchNorm(BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                })
            }
            other => {
                if n != 0 || fan_in != fan_out {
                    return Err(bad("parameter-free layer with tensors or mismatched widths"));
                }
                match other {
                    LayerKind::Relu => Layer::Relu(fan_in),
                    LayerKind::SignAct => Layer::SignAct(fan_in),
                    LayerKind::Hardtanh => Layer::Hardtanh(fan_in),
                    _ => Layer::SoftmaxXentHead(fan_in),
                }
            }
        };
        layers.push(layer);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last layer",
            bytes.len() - r.pos
        )));
    }
    let model = Model::from_layers(layers).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if model.config_hash() != stored_hash {
        return Err(Error::Checkpoint(
            "config hash mismatch: stored hash does not describe the stored layers".into(),
        ));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, write_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
