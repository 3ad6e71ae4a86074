//! `SLM1` model files.
//!
//! Little-endian: magic `SLM1`, u32 layer count, then per layer a u8 kind
//! tag, a u32 dim count and that many u32 dims; then every parameter tensor
//! as raw f32 in declaration order (weight before bias).

use std::fs;
use std::path::Path;

use super::network::{Layer, Network};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SLM1";

const TAG_CONV3X3: u8 = 1;
const TAG_RELU: u8 = 2;
const TAG_MAXPOOL2: u8 = 3;
const TAG_GAP: u8 = 4;
const TAG_LINEAR: u8 = 5;

fn layer_code(layer: &Layer) -> (u8, Vec<u32>) {
    match *layer {
        Layer::Conv3x3 { in_channels, out_channels } => (TAG_CONV3X3, vec![in_channels as u32, out_channels as u32]),
        Layer::Relu => (TAG_RELU, vec![]),
        Layer::MaxPool2 => (TAG_MAXPOOL2, vec![]),
        Layer::GlobalAvgPool => (TAG_GAP, vec![]),
        Layer::Linear { inputs, outputs } => (TAG_LINEAR, vec![inputs as u32, outputs as u32]),
    }
}

fn layer_from_code(tag: u8, dims: &[u32]) -> Result<Layer> {
    let d = |n: usize| -> Result<Vec<usize>> {
        if dims.len() != n {
            return Err(Error::ArchMismatch(format!("layer tag {tag} takes {n} dims, file has {}", dims.len())));
        }
        Ok(dims.iter().map(|&v| v as usize).collect())
    };
    Ok(match tag {
        TAG_CONV3X3 => {
            let v = d(2)?;
            Layer::Conv3x3 { in_channels: v[0], out_channels: v[1] }
        }
        TAG_RELU => {
            d(0)?;
            Layer::Relu
        }
        TAG_MAXPOOL2 => {
            d(0)?;
            Layer::MaxPool2
        }
        TAG_GAP => {
            d(0)?;
            Layer::GlobalAvgPool
        }
        TAG_LINEAR => {
            let v = d(2)?;
            Layer::Linear { inputs: v[0], outputs: v[1] }
        }
        other => return Err(Error::ArchMismatch(format!("unknown layer tag {other}"))),
    })
}

pub fn encode_model(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
    for layer in net.layers() {
        let (tag, dims) = layer_code(layer);
        out.push(tag);
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
    }
    for p in net.params() {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<Network> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(Error::BadMagic { expected: MAGIC, found: bytes[..bytes.len().min(4)].to_vec() });
    }
    let mut r = Reader { bytes, pos: 4 };
    let n_layers = r.u32()? as usize;
    let mut layers = Vec::with_capacity(n_layers.min(1024));
    for _ in 0..n_layers {
        let tag = r.take(1)?[0];
        let n_dims = r.u32()? as usize;
        if n_dims > 8 {
            return Err(Error::ArchMismatch(format!("layer tag {tag} with {n_dims} dims")));
        }
        let dims = (0..n_dims).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        layers.push(layer_from_code(tag, &dims)?);
    }
    let template = Network::zeros(layers.clone())?;
    let mut params = Vec::with_capacity(template.params().len());
    for slot in template.params() {
        let raw = r.take(slot.len() * 4)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        params.push(Tensor::new(slot.shape().to_vec(), data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::ArchMismatch(format!("{} trailing bytes after parameters", bytes.len() - r.pos)));
    }
    Network::from_parts(layers, params)
}

pub fn save_model(path: &Path, net: &Network) -> Result<()> {
    fs::write(path, encode_model(net))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Network> {
    decode_model(&fs::read(path)?)
}

/// Loads a model and checks it predicts `num_classes` classes.
pub fn load_model_for(path: &Path, num_classes: usize) -> Result<Network> {
    let net = load_model(path)?;
    net.check_classes(num_classes)?;
    Ok(net)
}
