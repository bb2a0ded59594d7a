//! Binary model container.
//!
//! Layout (little-endian): magic `NDNN`, `u32` version, `u32` input rank,
//! `u64` dims, `u32` layer count, then per layer a `u8` kind tag, its `u64`
//! hyper-parameters (dropout rate as `f64` bits), and the weight and bias
//! arrays as `u64` length followed by raw `f64` bits. Parameters round-trip
//! bit-exactly.

use std::path::Path;

use super::layer::LayerSpec;
use super::network::NetworkModel;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"NDNN";
pub const MODEL_FORMAT_VERSION: u32 = 1;

pub fn model_to_bytes(model: &NetworkModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.input_shape().len() as u32).to_le_bytes());
    for &d in model.input_shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&(model.layers().len() as u32).to_le_bytes());
    for layer in model.layers() {
        let (tag, params): (u8, Vec<u64>) = match *layer.spec() {
            LayerSpec::Dense { in_units, out_units } => (0, vec![in_units as u64, out_units as u64]),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_size,
                stride,
            } => (
                1,
                vec![in_channels as u64, out_channels as u64, kernel_size as u64, stride as u64],
            ),
            LayerSpec::MaxPool2x2 => (2, vec![]),
            LayerSpec::Relu => (3, vec![]),
            LayerSpec::Dropout { rate } => (4, vec![rate.to_bits()]),
            LayerSpec::Softmax => (5, vec![]),
        };
        out.push(tag);
        for p in params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        for values in [layer.weights(), layer.bias()] {
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }
    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
    fn usize(&mut self) -> Option<usize> {
        self.u64().and_then(|v| usize::try_from(v).ok())
    }
    fn f64s(&mut self) -> Option<Vec<f64>> {
        let n = self.usize()?;
        let bytes = self.take(n.checked_mul(8)?)?;
        Some(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        )
    }
}

pub fn model_from_bytes(bytes: &[u8], origin: &Path) -> Result<NetworkModel> {
    let truncated = || Error::format(origin, "truncated model file");
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4) != Some(MAGIC.as_slice()) {
        return Err(Error::format(origin, "not a model file (bad magic)"));
    }
    let version = r.u32().ok_or_else(truncated)?;
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::format(
            origin,
            format!("unsupported model format version {version}"),
        ));
    }
    let rank = r.u32().ok_or_else(truncated)? as usize;
    let input: Vec<usize> = (0..rank)
        .map(|_| r.usize())
        .collect::<Option<_>>()
        .ok_or_else(truncated)?;
    let count = r.u32().ok_or_else(truncated)?;
    let mut specs = Vec::new();
    let mut params = Vec::new();
    for _ in 0..count {
        let tag = r.u8().ok_or_else(truncated)?;
        let spec = match tag {
            0 => LayerSpec::Dense {
                in_units: r.usize().ok_or_else(truncated)?,
                out_units: r.usize().ok_or_else(truncated)?,
            },
            1 => LayerSpec::Conv2d {
                in_channels: r.usize().ok_or_else(truncated)?,
                out_channels: r.usize().ok_or_else(truncated)?,
                kernel_size: r.usize().ok_or_else(truncated)?,
                stride: r.usize().ok_or_else(truncated)?,
            },
            2 => LayerSpec::MaxPool2x2,
            3 => LayerSpec::Relu,
            4 => LayerSpec::Dropout {
                rate: f64::from_bits(r.u64().ok_or_else(truncated)?),
            },
            5 => LayerSpec::Softmax,
            t => return Err(Error::format(origin, format!("unknown layer tag {t}"))),
        };
        let w = r.f64s().ok_or_else(truncated)?;
        let b = r.f64s().ok_or_else(truncated)?;
        specs.push(spec);
        params.push((w, b));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(origin, "trailing bytes after model"));
    }
    NetworkModel::from_parts(&input, &specs, params)
        .map_err(|e| Error::format(origin, e.to_string()))
}

pub fn save_model(model: &NetworkModel, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<NetworkModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes, path)
}
