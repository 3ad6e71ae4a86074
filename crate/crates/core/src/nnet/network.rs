//! Layered CNN over NHWC batches with a global-average-pool embedding tap.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gemm::gemm;
use super::scratch;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

/// Channels produced by the image loader.
pub const INPUT_CHANNELS: usize = 3;

/// Default backbone widths: three 3x3 conv / ReLU / 2x2 max-pool blocks.
pub const DEFAULT_CHANNELS: [usize; 3] = [16, 32, 64];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layer {
    /// 3x3 convolution, stride 1, zero padding 1.
    Conv3x3 { in_channels: usize, out_channels: usize },
    Relu,
    /// 2x2 max pool, stride 2; odd trailing rows/columns are dropped.
    MaxPool2,
    GlobalAvgPool,
    Linear { inputs: usize, outputs: usize },
}

impl Layer {
    /// Parameter shapes (weight, bias), if the layer has parameters.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            Layer::Conv3x3 { in_channels, out_channels } => {
                Some((vec![9 * in_channels, out_channels], vec![out_channels]))
            }
            Layer::Linear { inputs, outputs } => Some((vec![inputs, outputs], vec![outputs])),
            _ => None,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            Layer::Conv3x3 { in_channels, .. } => 9 * in_channels,
            Layer::Linear { inputs, .. } => inputs,
            _ => 0,
        }
    }
}

/// Checks that the layer list composes and returns `(embedding_dim, num_classes)`.
pub fn validate_architecture(layers: &[Layer]) -> Result<(usize, usize)> {
    let mut channels = INPUT_CHANNELS;
    let mut flat = false;
    let mut embedding_dim = None;
    for (i, layer) in layers.iter().enumerate() {
        match *layer {
            Layer::Conv3x3 { in_channels, out_channels } => {
                if flat || in_channels != channels || out_channels == 0 {
                    return Err(Error::ArchMismatch(format!(
                        "layer {i}: conv expects {in_channels} input channels, has {channels}{}",
                        if flat { " after pooling to a vector" } else { "" }
                    )));
                }
                channels = out_channels;
            }
            Layer::Relu => {}
            Layer::MaxPool2 => {
                if flat {
                    return Err(Error::ArchMismatch(format!("layer {i}: max pool after global pooling")));
                }
            }
            Layer::GlobalAvgPool => {
                if flat {
                    return Err(Error::ArchMismatch(format!("layer {i}: second global pooling")));
                }
                flat = true;
                embedding_dim = Some(channels);
            }
            Layer::Linear { inputs, outputs } => {
                if !flat || inputs != channels || outputs == 0 {
                    return Err(Error::ArchMismatch(format!(
                        "layer {i}: linear expects {inputs} inputs, has {channels}"
                    )));
                }
                channels = outputs;
            }
        }
    }
    match (embedding_dim, layers.last()) {
        (Some(dim), Some(Layer::Linear { outputs, .. })) if *outputs >= 2 => Ok((dim, *outputs)),
        _ => Err(Error::ArchMismatch(
            "network must contain a global pooling layer and end in a linear layer with >= 2 outputs".into(),
        )),
    }
}

/// The standard backbone: `[conv, relu, maxpool] x widths -> GAP -> linear`.
pub fn backbone(widths: &[usize], num_classes: usize) -> Vec<Layer> {
    let mut layers = Vec::new();
    let mut channels = INPUT_CHANNELS;
    for &w in widths {
        layers.push(Layer::Conv3x3 { in_channels: channels, out_channels: w });
        layers.push(Layer::Relu);
        layers.push(Layer::MaxPool2);
        channels = w;
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(Layer::Linear { inputs: channels, outputs: num_classes });
    layers
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<Layer>,
    /// Weight and bias of every parameterized layer, in layer order.
    params: Vec<Tensor>,
    embedding_dim: usize,
    num_classes: usize,
}

/// Parameter gradients, laid out like [`Network::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Tensor>);

pub struct ForwardOutput {
    pub logits: Tensor,
    pub embeddings: Tensor,
}

#[derive(Debug, Clone, Copy)]
struct Dims {
    b: usize,
    h: usize,
    w: usize,
    c: usize,
}

enum LayerCache {
    Conv { col: Vec<f32>, input: Dims },
    Relu { active: Vec<bool> },
    MaxPool { argmax: Vec<u32>, input: Dims },
    Gap { input: Dims },
    Linear { input: Vec<f32>, batch: usize },
}

/// Activations saved by [`Network::forward_with_cache`] for one batch.
pub struct ForwardCache {
    batch: usize,
    layers: Vec<LayerCache>,
}

impl LayerCache {
    fn recycle(self) {
        match self {
            LayerCache::Conv { col, .. } => scratch::recycle(col),
            LayerCache::Linear { input, .. } => scratch::recycle(input),
            _ => {}
        }
    }
}

impl Drop for ForwardCache {
    fn drop(&mut self) {
        self.layers.drain(..).for_each(LayerCache::recycle);
    }
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.batch
    }
}

enum Activation {
    Spatial(Dims, Vec<f32>),
    Flat { b: usize, f: usize, data: Vec<f32> },
}

impl Network {
    /// He-uniform weights, zero biases.
    pub fn new(layers: Vec<Layer>, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(layers)?;
        let mut rng = rng_for(seed, stream::INIT, 0);
        let mut slot = 0;
        for layer in &net.layers {
            if layer.param_shapes().is_some() {
                let limit = (6.0 / layer.fan_in() as f32).sqrt();
                for w in net.params[slot].data_mut() {
                    *w = rng.random_range(-limit..limit);
                }
                slot += 2;
            }
        }
        Ok(net)
    }

    /// All weights and biases zero.
    pub fn zeros(layers: Vec<Layer>) -> Result<Self> {
        let (embedding_dim, num_classes) = validate_architecture(&layers)?;
        let params = layers
            .iter()
            .filter_map(Layer::param_shapes)
            .flat_map(|(w, b)| [Tensor::zeros(w), Tensor::zeros(b)])
            .collect();
        Ok(Self { layers, params, embedding_dim, num_classes })
    }

    pub fn small_cnn(num_classes: usize, widths: &[usize], seed: u64) -> Result<Self> {
        Self::new(backbone(widths, num_classes), seed)
    }

    pub(crate) fn from_parts(layers: Vec<Layer>, params: Vec<Tensor>) -> Result<Self> {
        let mut net = Self::zeros(layers)?;
        if params.len() != net.params.len() {
            return Err(Error::ArchMismatch(format!(
                "{} parameter tensors for {} slots",
                params.len(),
                net.params.len()
            )));
        }
        for (slot, p) in net.params.iter_mut().zip(params) {
            if slot.shape() != p.shape() {
                return Err(Error::ArchMismatch(format!("parameter shape {:?} vs {:?}", p.shape(), slot.shape())));
            }
            *slot = p;
        }
        Ok(net)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn check_classes(&self, requested: usize) -> Result<()> {
        if requested != self.num_classes {
            return Err(Error::ClassCountMismatch { model: self.num_classes, requested });
        }
        Ok(())
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients(self.params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect())
    }

    pub fn forward(&self, batch: &Tensor) -> Result<ForwardOutput> {
        self.run_forward(batch, None)
    }

    pub fn forward_with_cache(&self, batch: &Tensor) -> Result<(ForwardOutput, ForwardCache)> {
        let mut layers = Vec::with_capacity(self.layers.len());
        let out = self.run_forward(batch, Some(&mut layers))?;
        let cache = ForwardCache { batch: batch.shape()[0], layers };
        Ok((out, cache))
    }

    fn run_forward(&self, batch: &Tensor, mut cache: Option<&mut Vec<LayerCache>>) -> Result<ForwardOutput> {
        let shape = batch.shape();
        if shape.len() != 4 || shape[3] != INPUT_CHANNELS || shape[1] == 0 || shape[2] == 0 {
            return Err(Error::ShapeMismatch(format!(
                "expected input [B,H,W,{INPUT_CHANNELS}], got {shape:?}"
            )));
        }
        let dims = Dims { b: shape[0], h: shape[1], w: shape[2], c: shape[3] };
        let mut act = Activation::Spatial(dims, scratch::copied(batch.data()));
        let mut embeddings = None;
        let mut slot = 0;
        for layer in &self.layers {
            let (next, entry) = match (*layer, act) {
                (Layer::Conv3x3 { out_channels, .. }, Activation::Spatial(d, x)) => {
                    let col = im2col(&x, d);
                    scratch::recycle(x);
                    let mut y = scratch::zeroed(d.b * d.h * d.w * out_channels);
                    conv_forward(&col, d, &self.params[slot], &self.params[slot + 1], &mut y);
                    slot += 2;
                    let out = Dims { c: out_channels, ..d };
                    (Activation::Spatial(out, y), LayerCache::Conv { col, input: d })
                }
                (Layer::Relu, mut act) => {
                    let data = match &mut act {
                        Activation::Spatial(_, x) => x,
                        Activation::Flat { data, .. } => data,
                    };
                    let active: Vec<bool> = data.iter().map(|&v| v > 0.0).collect();
                    for v in data.iter_mut() {
                        if *v <= 0.0 {
                            *v = 0.0;
                        }
                    }
                    (act, LayerCache::Relu { active })
                }
                (Layer::MaxPool2, Activation::Spatial(d, x)) => {
                    let (y, argmax, out) = maxpool_forward(&x, d);
                    scratch::recycle(x);
                    (Activation::Spatial(out, y), LayerCache::MaxPool { argmax, input: d })
                }
                (Layer::GlobalAvgPool, Activation::Spatial(d, x)) => {
                    let y = gap_forward(&x, d);
                    scratch::recycle(x);
                    embeddings = Some(Tensor::new(vec![d.b, d.c], y.clone())?);
                    (Activation::Flat { b: d.b, f: d.c, data: y }, LayerCache::Gap { input: d })
                }
                (Layer::Linear { inputs, outputs }, Activation::Flat { b, f, data }) => {
                    debug_assert_eq!(f, inputs);
                    let mut y = vec![0.0; b * outputs];
                    for row in y.chunks_exact_mut(outputs) {
                        row.copy_from_slice(self.params[slot + 1].data());
                    }
                    gemm(b, inputs, outputs, &data, false, self.params[slot].data(), false, 1.0, &mut y);
                    slot += 2;
                    (Activation::Flat { b, f: outputs, data: y }, LayerCache::Linear { input: data, batch: b })
                }
                _ => unreachable!("architecture validated at construction"),
            };
            act = next;
            match cache.as_deref_mut() {
                Some(c) => c.push(entry),
                None => entry.recycle(),
            }
        }
        let Activation::Flat { b, f, data } = act else {
            unreachable!("architecture ends in a linear layer")
        };
        let logits = Tensor::new(vec![b, f], data)?;
        if !logits.all_finite() {
            return Err(Error::NonFinite("network produced non-finite logits".into()));
        }
        Ok(ForwardOutput { logits, embeddings: embeddings.expect("architecture has a GAP layer") })
    }

    /// Reverse pass: parameter gradients for upstream gradient `dlogits`.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Tensor) -> Result<Gradients> {
        if dlogits.shape() != [cache.batch, self.num_classes] {
            return Err(Error::ShapeMismatch(format!(
                "upstream gradient {:?} does not match cached batch [{}, {}]",
                dlogits.shape(),
                cache.batch,
                self.num_classes
            )));
        }
        if cache.layers.len() != self.layers.len() {
            return Err(Error::ShapeMismatch("forward cache belongs to a different network".into()));
        }
        let mut grads = self.zero_gradients();
        let mut slot = self.params.len();
        let mut upstream = dlogits.data().to_vec();
        for (i, (layer, entry)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            let needs_input_grad = i > 0;
            upstream = match (*layer, entry) {
                (Layer::Conv3x3 { in_channels, out_channels }, LayerCache::Conv { col, input }) => {
                    slot -= 2;
                    let m = input.b * input.h * input.w;
                    let k = 9 * in_channels;
                    let (gw, gb) = two_mut(&mut grads.0, slot);
                    gemm(k, m, out_channels, col, true, &upstream, false, 0.0, gw.data_mut());
                    column_sums(&upstream, out_channels, gb.data_mut());
                    if needs_input_grad {
                        let mut dcol = scratch::zeroed(m * k);
                        gemm(m, out_channels, k, &upstream, false, self.params[slot].data(), true, 0.0, &mut dcol);
                        scratch::recycle(std::mem::take(&mut upstream));
                        let dx = col2im(&dcol, *input);
                        scratch::recycle(dcol);
                        dx
                    } else {
                        scratch::recycle(std::mem::take(&mut upstream));
                        Vec::new()
                    }
                }
                (Layer::Relu, LayerCache::Relu { active }) => {
                    for (g, &a) in upstream.iter_mut().zip(active) {
                        if !a {
                            *g = 0.0;
                        }
                    }
                    upstream
                }
                (Layer::MaxPool2, LayerCache::MaxPool { argmax, input }) => {
                    let mut dx = scratch::zeroed(input.b * input.h * input.w * input.c);
                    for (&src, &g) in argmax.iter().zip(&upstream) {
                        dx[src as usize] += g;
                    }
                    scratch::recycle(std::mem::take(&mut upstream));
                    dx
                }
                (Layer::GlobalAvgPool, LayerCache::Gap { input }) => {
                    let scale = 1.0 / (input.h * input.w) as f32;
                    let mut dx = scratch::zeroed(input.b * input.h * input.w * input.c);
                    for (b, block) in dx.chunks_exact_mut(input.h * input.w * input.c).enumerate() {
                        let g = &upstream[b * input.c..(b + 1) * input.c];
                        for px in block.chunks_exact_mut(input.c) {
                            for (v, &gc) in px.iter_mut().zip(g) {
                                *v = gc * scale;
                            }
                        }
                    }
                    dx
                }
                (Layer::Linear { inputs, outputs }, LayerCache::Linear { input, batch }) => {
                    slot -= 2;
                    let (gw, gb) = two_mut(&mut grads.0, slot);
                    gemm(inputs, *batch, outputs, input, true, &upstream, false, 0.0, gw.data_mut());
                    column_sums(&upstream, outputs, gb.data_mut());
                    let mut dx = vec![0.0; batch * inputs];
                    gemm(*batch, outputs, inputs, &upstream, false, self.params[slot].data(), true, 0.0, &mut dx);
                    dx
                }
                _ => return Err(Error::ShapeMismatch("forward cache does not match layer list".into())),
            };
        }
        Ok(grads)
    }
}

fn two_mut(v: &mut [Tensor], slot: usize) -> (&mut Tensor, &mut Tensor) {
    let (a, b) = v[slot..].split_at_mut(1);
    (&mut a[0], &mut b[0])
}

fn column_sums(rows: &[f32], cols: usize, out: &mut [f32]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for row in rows.chunks_exact(cols) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// `[B*H*W, 9*C]` patch matrix; column order `(ky, kx, c)`.
///
/// In NHWC the three `kx` taps of one kernel row are adjacent in memory, so
/// interior pixels copy `3*C` floats per kernel row.
fn im2col(x: &[f32], d: Dims) -> Vec<f32> {
    let (c, k) = (d.c, 9 * d.c);
    let mut col = scratch::zeroed(d.b * d.h * d.w * k);
    for (b, image) in x.chunks_exact(d.h * d.w * c).enumerate() {
        for y in 0..d.h {
            let rows = &mut col[(b * d.h + y) * d.w * k..(b * d.h + y + 1) * d.w * k];
            for ky in 0..3 {
                let Some(sy) = (y + ky).checked_sub(1).filter(|&sy| sy < d.h) else {
                    continue;
                };
                let src_row = &image[sy * d.w * c..(sy + 1) * d.w * c];
                for (xx, dst) in rows.chunks_exact_mut(k).enumerate() {
                    let dst = &mut dst[ky * 3 * c..(ky + 1) * 3 * c];
                    let lo = xx.saturating_sub(1);
                    let hi = (xx + 2).min(d.w);
                    let off = (lo + 1 - xx) * c;
                    dst[off..off + (hi - lo) * c].copy_from_slice(&src_row[lo * c..hi * c]);
                }
            }
        }
    }
    col
}

/// Scatter-adds a patch-matrix gradient back onto the input layout.
fn col2im(dcol: &[f32], d: Dims) -> Vec<f32> {
    let (c, k) = (d.c, 9 * d.c);
    let mut dx = scratch::zeroed(d.b * d.h * d.w * c);
    for (b, image) in dx.chunks_exact_mut(d.h * d.w * c).enumerate() {
        for y in 0..d.h {
            let rows = &dcol[(b * d.h + y) * d.w * k..(b * d.h + y + 1) * d.w * k];
            for ky in 0..3 {
                let Some(sy) = (y + ky).checked_sub(1).filter(|&sy| sy < d.h) else {
                    continue;
                };
                let dst_row = &mut image[sy * d.w * c..(sy + 1) * d.w * c];
                for (xx, src) in rows.chunks_exact(k).enumerate() {
                    let src = &src[ky * 3 * c..(ky + 1) * 3 * c];
                    let lo = xx.saturating_sub(1);
                    let hi = (xx + 2).min(d.w);
                    let off = (lo + 1 - xx) * c;
                    for (v, &g) in dst_row[lo * c..hi * c].iter_mut().zip(&src[off..off + (hi - lo) * c]) {
                        *v += g;
                    }
                }
            }
        }
    }
    dx
}

fn conv_forward(col: &[f32], d: Dims, weight: &Tensor, bias: &Tensor, y: &mut [f32]) {
    let out_channels = bias.len();
    for row in y.chunks_exact_mut(out_channels) {
        row.copy_from_slice(bias.data());
    }
    gemm(d.b * d.h * d.w, 9 * d.c, out_channels, col, false, weight.data(), false, 1.0, y);
}

fn maxpool_forward(x: &[f32], d: Dims) -> (Vec<f32>, Vec<u32>, Dims) {
    let out = Dims { h: d.h / 2, w: d.w / 2, ..d };
    let c = d.c;
    let mut y = scratch::zeroed(out.b * out.h * out.w * c);
    let mut argmax = Vec::with_capacity(y.len());
    let mut o = 0;
    for b in 0..d.b {
        for oy in 0..out.h {
            let top = (b * d.h + 2 * oy) * d.w * c;
            for ox in 0..out.w {
                let corners = [0, c, d.w * c, (d.w + 1) * c].map(|o| top + 2 * ox * c + o);
                for ch in 0..c {
                    let mut best_idx = corners[0] + ch;
                    for &corner in &corners[1..] {
                        if x[corner + ch] > x[best_idx] {
                            best_idx = corner + ch;
                        }
                    }
                    y[o] = x[best_idx];
                    argmax.push(best_idx as u32);
                    o += 1;
                }
            }
        }
    }
    (y, argmax, out)
}

fn gap_forward(x: &[f32], d: Dims) -> Vec<f32> {
    let mut y = vec![0.0; d.b * d.c];
    let scale = 1.0 / (d.h * d.w) as f32;
    for (b, block) in x.chunks_exact(d.h * d.w * d.c).enumerate() {
        let acc = &mut y[b * d.c..(b + 1) * d.c];
        for px in block.chunks_exact(d.c) {
            for (a, &v) in acc.iter_mut().zip(px) {
                *a += v;
            }
        }
        for a in acc.iter_mut() {
            *a *= scale;
        }
    }
    y
}
