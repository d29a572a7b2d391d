//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MSDC" | version: u32 | layer count: u32 |
//!   per layer: tag: u8 | dim count: u32 | dims: u32 * dim count |
//!              weights: f32 * prod(dims) | biases: f32 * out
//! ```
//!
//! Parameterless layers carry zero dims and no payload. The bias length is
//! `dims[0]` for convolutions (O x C x k x k) and `dims[1]` for dense
//! layers (F x K).

use std::path::Path;

use crate::autodiff::model::{bias_name, weight_name};
use crate::autodiff::{Layer, Model, ParamSet, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MSDC";
pub const VERSION: u32 = 1;

fn tag(layer: Layer) -> u8 {
    match layer {
        Layer::Conv => 1,
        Layer::Dense => 2,
        Layer::MaxPool => 3,
        Layer::Relu => 4,
        Layer::Flatten => 5,
        Layer::AuxConcat => 6,
    }
}

fn layer_from_tag(t: u8) -> Result<Layer> {
    Ok(match t {
        1 => Layer::Conv,
        2 => Layer::Dense,
        3 => Layer::MaxPool,
        4 => Layer::Relu,
        5 => Layer::Flatten,
        6 => Layer::AuxConcat,
        other => return Err(Error::format("checkpoint", format!("unknown layer tag {other}"))),
    })
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.layers().len() as u32).to_le_bytes());
    for (i, &layer) in model.layers().iter().enumerate() {
        out.push(tag(layer));
        if !layer.has_params() {
            out.extend_from_slice(&0u32.to_le_bytes());
            continue;
        }
        let w = model.params().get(&weight_name(i)).expect("validated model");
        let b = model.params().get(&bias_name(i)).expect("validated model");
        out.extend_from_slice(&(w.shape().len() as u32).to_le_bytes());
        for &d in w.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in w.data().iter().chain(b.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::format("checkpoint", "unexpected end of data"));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::format("checkpoint", "size overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { buf: bytes };
    if r.take(4)? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(count.min(1024));
    let mut params = ParamSet::new();
    for i in 0..count {
        let layer = layer_from_tag(r.take(1)?[0])?;
        let ndims = r.u32()? as usize;
        let dims = (0..ndims).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let expected = match layer {
            Layer::Conv => 4,
            Layer::Dense => 2,
            _ => 0,
        };
        if ndims != expected {
            return Err(Error::format("checkpoint", format!("layer {i}: {ndims} dims for {layer:?}")));
        }
        if layer.has_params() {
            let wlen = dims.iter().product();
            let blen = if layer == Layer::Conv { dims[0] } else { dims[1] };
            let w = Tensor::new(dims.clone(), r.floats(wlen)?)?;
            let b = Tensor::new(vec![blen], r.floats(blen)?)?;
            params.insert(weight_name(i), w)?;
            params.insert(bias_name(i), b)?;
        }
        layers.push(layer);
    }
    if !r.buf.is_empty() {
        return Err(Error::format("checkpoint", "trailing bytes"));
    }
    Model::from_parts(layers, params)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    crate::io::write_file(path, &to_bytes(model))
}

pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&crate::io::read_file(path)?)
}
