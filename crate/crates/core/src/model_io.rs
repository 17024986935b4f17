//! Binary model files.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "FBNMODEL"  u32 version
//! u32 rank, u64 × rank        example shape the model expects
//! u32 layer count, layers...
//! ```
//!
//! Each layer is a tag byte followed by its payload. Tensors are stored as
//! `u32 rank, u64 × rank dims, f64 × len data`. Batch-norm layers carry their
//! mode, so a frozen model stays frozen after a reload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Layer, Model};
use crate::nn::{Conv2dLayer, DenseLayer};
use crate::norm::{GroupNormLayer, NormLayerState, NormMode, RunningStats};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FBNMODEL";
pub const VERSION: u32 = 1;

/// Residual blocks may nest, but not deeper than this.
const MAX_DEPTH: usize = 16;

const TAG_DENSE: u8 = 1;
const TAG_CONV: u8 = 2;
const TAG_RELU: u8 = 3;
const TAG_FLATTEN: u8 = 4;
const TAG_BATCH_NORM: u8 = 5;
const TAG_GROUP_NORM: u8 = 6;
const TAG_RESIDUAL: u8 = 7;

/// A model together with the per-example input shape it was built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub input_shape: Vec<usize>,
    pub model: Model,
}

pub fn encode(file: &ModelFile) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, file.input_shape.len() as u32);
    for &d in &file.input_shape {
        put_u64(&mut out, d as u64);
    }
    put_layers(&mut out, &file.model.layers);
    out
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    put_u32(out, t.rank() as u32);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for &v in t.data() {
        put_f64(out, v);
    }
}

fn put_layers(out: &mut Vec<u8>, layers: &[Layer]) {
    put_u32(out, layers.len() as u32);
    for layer in layers {
        match layer {
            Layer::Dense(d) => {
                out.push(TAG_DENSE);
                put_tensor(out, &d.weight);
                put_tensor(out, &d.bias);
            }
            Layer::Conv2d(c) => {
                out.push(TAG_CONV);
                put_u64(out, c.stride as u64);
                put_u64(out, c.padding as u64);
                put_tensor(out, &c.kernel);
                put_tensor(out, &c.bias);
            }
            Layer::Relu => out.push(TAG_RELU),
            Layer::Flatten => out.push(TAG_FLATTEN),
            Layer::BatchNorm(bn) => {
                out.push(TAG_BATCH_NORM);
                out.push(u8::from(bn.is_frozen()));
                put_f64(out, bn.ema_alpha);
                put_f64(out, bn.epsilon);
                put_tensor(out, &bn.gamma);
                put_tensor(out, &bn.beta);
                put_tensor(out, &bn.running.mean);
                put_tensor(out, &bn.running.var);
            }
            Layer::GroupNorm(gn) => {
                out.push(TAG_GROUP_NORM);
                put_u64(out, gn.groups as u64);
                put_f64(out, gn.epsilon);
                put_tensor(out, &gn.gamma);
                put_tensor(out, &gn.beta);
            }
            Layer::Residual(inner) => {
                out.push(TAG_RESIDUAL);
                put_layers(out, inner);
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format(format!("offset {}: {}", self.pos, msg.into()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.fail(format!("truncated: need {n} bytes, {} left", self.remaining())));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.fail(format!("value {v} too large")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// A count of items that each occupy at least `min_bytes`, checked
    /// against the bytes left so corrupt counts cannot force huge allocations.
    fn count(&mut self, min_bytes: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n.saturating_mul(min_bytes) > self.remaining() {
            return Err(self.fail(format!("count {n} exceeds remaining data")));
        }
        Ok(n)
    }

    fn shape(&mut self) -> Result<Vec<usize>> {
        let rank = self.count(8)?;
        (0..rank).map(|_| self.usize()).collect()
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let shape = self.shape()?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= self.remaining()))
            .ok_or_else(|| self.fail(format!("tensor shape {shape:?} exceeds remaining data")))?;
        let data = (0..len).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data).map_err(|e| self.fail(e.to_string()))
    }

    fn layers(&mut self, depth: usize) -> Result<Vec<Layer>> {
        if depth > MAX_DEPTH {
            return Err(self.fail("residual blocks nested too deeply"));
        }
        let n = self.count(1)?;
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let tag = self.u8()?;
            let layer = match tag {
                TAG_DENSE => {
                    let w = self.tensor()?;
                    let b = self.tensor()?;
                    Layer::Dense(DenseLayer::from_parts(w, b).map_err(|e| self.fail(e.to_string()))?)
                }
                TAG_CONV => {
                    let stride = self.usize()?;
                    let padding = self.usize()?;
                    let k = self.tensor()?;
                    let b = self.tensor()?;
                    if k.rank() == 4 && (padding >= k.dim(2) || padding >= k.dim(3)) {
                        return Err(self.fail(format!("padding {padding} not smaller than the kernel")));
                    }
                    Layer::Conv2d(Conv2dLayer::from_parts(k, b, stride, padding).map_err(|e| self.fail(e.to_string()))?)
                }
                TAG_RELU => Layer::Relu,
                TAG_FLATTEN => Layer::Flatten,
                TAG_BATCH_NORM => {
                    let mode = match self.u8()? {
                        0 => NormMode::Train,
                        1 => NormMode::FrozenEval,
                        m => return Err(self.fail(format!("unknown batch-norm mode {m}"))),
                    };
                    let alpha = self.f64()?;
                    let eps = self.f64()?;
                    let gamma = self.tensor()?;
                    let beta = self.tensor()?;
                    let mean = self.tensor()?;
                    let var = self.tensor()?;
                    let running = RunningStats { mean, var };
                    Layer::BatchNorm(
                        NormLayerState::from_parts(gamma, beta, running, alpha, eps, mode)
                            .map_err(|e| self.fail(e.to_string()))?,
                    )
                }
                TAG_GROUP_NORM => {
                    let groups = self.usize()?;
                    let eps = self.f64()?;
                    let gamma = self.tensor()?;
                    let beta = self.tensor()?;
                    if gamma.rank() != 1 || !gamma.same_shape(&beta) {
                        return Err(self.fail("group-norm affine parameters must be matching vectors"));
                    }
                    let mut gn = GroupNormLayer::new(gamma.len(), groups, eps).map_err(|e| self.fail(e.to_string()))?;
                    gn.gamma = gamma;
                    gn.beta = beta;
                    Layer::GroupNorm(gn)
                }
                TAG_RESIDUAL => Layer::Residual(self.layers(depth + 1)?),
                other => return Err(self.fail(format!("unknown layer tag {other}"))),
            };
            layers.push(layer);
        }
        Ok(layers)
    }
}

/// Decodes a model file. Never panics on malformed input.
pub fn decode(bytes: &[u8]) -> Result<ModelFile> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported format version {version}")));
    }
    let input_shape = r.shape()?;
    if input_shape.is_empty() || input_shape.contains(&0) {
        return Err(r.fail(format!("invalid input shape {input_shape:?}")));
    }
    let layers = r.layers(0)?;
    if r.remaining() != 0 {
        return Err(r.fail(format!("{} trailing bytes", r.remaining())));
    }
    Ok(ModelFile {
        input_shape,
        model: Model::new(layers),
    })
}

pub fn save_model(file: &ModelFile, path: &Path) -> Result<()> {
    std::fs::write(path, encode(file)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelSpec, Normalizer};
    use crate::seed;

    fn conv_model() -> ModelFile {
        let spec = ModelSpec {
            input_shape: vec![2, 4, 4],
            conv_channels: vec![2, 2],
            residual: true,
            hidden: vec![3],
            classes: 2,
            normalizer: Normalizer::Batch,
            ema_alpha: 0.9,
            epsilon: 1e-5,
        };
        ModelFile {
            input_shape: spec.input_shape.clone(),
            model: spec.build(&mut seed::rng(5)).unwrap(),
        }
    }

    #[test]
    fn round_trip_preserves_frozen_mode() {
        let mut file = conv_model();
        let stats = file.model.running_stats();
        for (l, s) in file.model.bn_layers_mut().into_iter().zip(&stats) {
            l.freeze(s).unwrap();
        }
        let back = decode(&encode(&file)).unwrap();
        assert_eq!(back, file);
        assert!(back.model.is_frozen());
    }

    #[test]
    fn group_norm_round_trip() {
        let model = ModelSpec::mlp(3, vec![4], 2, Normalizer::Group(2))
            .build(&mut seed::rng(1))
            .unwrap();
        let file = ModelFile {
            input_shape: vec![3],
            model,
        };
        assert_eq!(decode(&encode(&file)).unwrap(), file);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&conv_model());
        assert!(matches!(decode(b"NOTMODEL"), Err(Error::Format(_))));
        for cut in [0, 8, 12, 20, bytes.len() - 1] {
            assert!(decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut version = bytes.clone();
        version[8] = 9;
        assert!(decode(&version).is_err());
    }

    #[test]
    fn huge_counts_do_not_allocate() {
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode(&bytes).is_err());
    }
}
