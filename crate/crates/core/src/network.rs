//! Network topology, the global channel registry, and masked forward/backward
//! passes.
//!
//! Every hidden conv or dense layer owns a contiguous range of global channel
//! indices. A [`Mask`] over those indices decides which channels exist for one
//! pass. The sparse pass never issues work for a pruned channel in either
//! operand position, and the backward pass only produces gradient blocks for
//! channels that were live in the forward pass.
//!
//! A second, gated pass computes every channel and multiplies each channel's
//! output by a real-valued gate. It exists for the straight-through baseline
//! and for oracles; it costs as much as the dense network.

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meter;
use crate::tensor::{self, ChannelSet, ConvGeometry, Tensor};

fn default_stride() -> usize {
    1
}

/// One hidden layer as written in a model description. The classifier is
/// appended by [`NetworkSpec::new`] and is never maskable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        /// Per-channel learnable scale and shift after the bias.
        #[serde(default)]
        affine: bool,
    },
    Dense {
        units: usize,
        #[serde(default)]
        affine: bool,
    },
    Relu,
    MaxPool,
}

/// A layer with all shapes resolved.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv {
        geom: ConvGeometry,
        in_channels: usize,
        out_channels: usize,
        channels: Range<usize>,
        affine: bool,
        param: usize,
    },
    Dense {
        in_channels: usize,
        /// Spatial size folded into each input channel by the implicit flatten.
        in_spatial: usize,
        units: usize,
        channels: Range<usize>,
        affine: bool,
        param: usize,
    },
    Classifier {
        in_channels: usize,
        in_spatial: usize,
        classes: usize,
        param: usize,
    },
    Relu,
    MaxPool,
}

impl Layer {
    /// Global channel range owned by this layer, if it is maskable.
    pub fn channels(&self) -> Option<Range<usize>> {
        match self {
            Layer::Conv { channels, .. } | Layer::Dense { channels, .. } => Some(channels.clone()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NetworkSpecDef {
    input_shape: Vec<usize>,
    classes: usize,
    layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "NetworkSpecDef", into = "NetworkSpecDef")]
pub struct NetworkSpec {
    input_shape: Vec<usize>,
    classes: usize,
    layers: Vec<LayerSpec>,
    resolved: Vec<Layer>,
    num_channels: usize,
}

impl PartialEq for NetworkSpec {
    fn eq(&self, other: &Self) -> bool {
        self.input_shape == other.input_shape && self.classes == other.classes && self.layers == other.layers
    }
}

impl TryFrom<NetworkSpecDef> for NetworkSpec {
    type Error = Error;
    fn try_from(d: NetworkSpecDef) -> Result<Self> {
        NetworkSpec::new(d.input_shape, d.classes, d.layers)
    }
}

impl From<NetworkSpec> for NetworkSpecDef {
    fn from(s: NetworkSpec) -> Self {
        NetworkSpecDef {
            input_shape: s.input_shape,
            classes: s.classes,
            layers: s.layers,
        }
    }
}

/// Activation shape while resolving: `[C, H, W]` or `[F]`.
#[derive(Clone, Copy)]
enum Shape {
    Map(usize, usize, usize),
    Flat(usize),
}

impl Shape {
    fn flat(self) -> (usize, usize) {
        match self {
            Shape::Map(c, h, w) => (c, h * w),
            Shape::Flat(f) => (f, 1),
        }
    }
}

impl NetworkSpec {
    /// Resolves shapes and assigns global channel ranges in layer order.
    /// `input_shape` is `[C, H, W]` for image input or `[D]` for vectors.
    pub fn new(input_shape: Vec<usize>, classes: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        if classes < 2 {
            return Err(Error::param("classes", "need at least two classes"));
        }
        let mut shape = match input_shape.as_slice() {
            &[c, h, w] if c > 0 && h > 0 && w > 0 => Shape::Map(c, h, w),
            &[d] if d > 0 => Shape::Flat(d),
            _ => return Err(Error::param("input_shape", format!("expected [C,H,W] or [D], got {input_shape:?}"))),
        };
        let mut resolved = Vec::with_capacity(layers.len() + 1);
        let mut next_channel = 0;
        let mut param = 0;
        for (idx, spec) in layers.iter().enumerate() {
            match *spec {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    affine,
                } => {
                    let Shape::Map(c, h, w) = shape else {
                        return Err(Error::param("layers", format!("layer {idx}: conv after a flat layer")));
                    };
                    if out_channels == 0 {
                        return Err(Error::param("layers", format!("layer {idx}: zero output channels")));
                    }
                    let geom = ConvGeometry::new(kernel, stride, padding, h, w)?;
                    resolved.push(Layer::Conv {
                        geom,
                        in_channels: c,
                        out_channels,
                        channels: next_channel..next_channel + out_channels,
                        affine,
                        param,
                    });
                    next_channel += out_channels;
                    param += 1;
                    shape = Shape::Map(out_channels, geom.out_h(), geom.out_w());
                }
                LayerSpec::Dense { units, affine } => {
                    if units == 0 {
                        return Err(Error::param("layers", format!("layer {idx}: zero units")));
                    }
                    let (in_channels, in_spatial) = shape.flat();
                    resolved.push(Layer::Dense {
                        in_channels,
                        in_spatial,
                        units,
                        channels: next_channel..next_channel + units,
                        affine,
                        param,
                    });
                    next_channel += units;
                    param += 1;
                    shape = Shape::Flat(units);
                }
                LayerSpec::Relu => resolved.push(Layer::Relu),
                LayerSpec::MaxPool => {
                    let Shape::Map(c, h, w) = shape else {
                        return Err(Error::param("layers", format!("layer {idx}: max-pool after a flat layer")));
                    };
                    if h < 2 || w < 2 {
                        return Err(Error::param("layers", format!("layer {idx}: {h}x{w} map too small to pool")));
                    }
                    resolved.push(Layer::MaxPool);
                    shape = Shape::Map(c, h / 2, w / 2);
                }
            }
        }
        let (in_channels, in_spatial) = shape.flat();
        resolved.push(Layer::Classifier {
            in_channels,
            in_spatial,
            classes,
            param,
        });
        Ok(NetworkSpec {
            input_shape,
            classes,
            layers,
            resolved,
            num_channels: next_channel,
        })
    }

    /// Fully connected stack `[dims] → hidden… → classes` with ReLUs.
    pub fn mlp(dims: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        let mut layers = Vec::new();
        for &units in hidden {
            layers.push(LayerSpec::Dense { units, affine: false });
            layers.push(LayerSpec::Relu);
        }
        NetworkSpec::new(vec![dims], classes, layers)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layer_specs(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layers(&self) -> &[Layer] {
        &self.resolved
    }

    /// |C|, the number of maskable channels.
    pub fn num_channels(&self) -> usize {
        self.num_channels
    }

    /// Global channel ranges of the maskable layers, in order.
    pub fn channel_groups(&self) -> Vec<Range<usize>> {
        self.resolved.iter().filter_map(Layer::channels).collect()
    }

    /// Per parameterized layer: (input channel set, output channel set)
    /// implied by `mask`. Input sets are in channel units of the preceding
    /// activation, not flattened features.
    pub fn active_sets(&self, mask: &Mask) -> Result<Vec<(ChannelSet, ChannelSet)>> {
        self.check_mask(mask)?;
        let mut live = ChannelSet::full(self.input_shape[0]);
        let mut out = Vec::new();
        for layer in &self.resolved {
            match layer {
                Layer::Conv { channels, .. } | Layer::Dense { channels, .. } => {
                    let act = mask.local_active(channels.clone());
                    out.push((live, act.clone()));
                    live = act;
                }
                Layer::Classifier { classes, .. } => out.push((live.clone(), ChannelSet::full(*classes))),
                Layer::Relu | Layer::MaxPool => {}
            }
        }
        Ok(out)
    }

    fn check_mask(&self, mask: &Mask) -> Result<()> {
        if mask.len() != self.num_channels {
            return Err(Error::Input(format!(
                "mask has {} entries, network has {} channels",
                mask.len(),
                self.num_channels
            )));
        }
        Ok(())
    }

    fn check_batch(&self, x: &Tensor, labels: &[usize]) -> Result<usize> {
        let shape = x.shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return Err(Error::Dimension {
                op: "forward",
                lhs: shape.to_vec(),
                rhs: self.input_shape.clone(),
            });
        }
        if labels.len() != shape[0] {
            return Err(Error::Input(format!("{} labels for a batch of {}", labels.len(), shape[0])));
        }
        Ok(shape[0])
    }

    /// Initializes weights uniformly in ±sqrt(6 / fan_in), biases and shifts at
    /// zero, scales at one.
    pub fn init_params(&self, rng: &mut impl Rng) -> NetworkParams {
        let mut layers = Vec::new();
        for layer in &self.resolved {
            let (shape, outs, affine) = match *layer {
                Layer::Conv {
                    geom,
                    in_channels,
                    out_channels,
                    affine,
                    ..
                } => (vec![out_channels, in_channels, geom.kernel, geom.kernel], out_channels, affine),
                Layer::Dense {
                    in_channels,
                    in_spatial,
                    units,
                    affine,
                    ..
                } => (vec![units, in_channels * in_spatial], units, affine),
                Layer::Classifier {
                    in_channels,
                    in_spatial,
                    classes,
                    ..
                } => (vec![classes, in_channels * in_spatial], classes, false),
                Layer::Relu | Layer::MaxPool => continue,
            };
            let fan_in: usize = shape[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            let weight = Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound));
            layers.push(LayerParams {
                weight,
                bias: vec![0.0; outs],
                scale: affine.then(|| vec![1.0; outs]),
                shift: affine.then(|| vec![0.0; outs]),
            });
        }
        NetworkParams {
            layers,
            stamp: fresh_stamp(),
        }
    }

    /// Sparse forward under `mask`: mean cross-entropy and the cache needed by
    /// [`NetworkSpec::backward_weights`].
    pub fn forward(&self, params: &NetworkParams, mask: &Mask, batch: &Batch) -> Result<(f64, ForwardCache)> {
        self.check_mask(mask)?;
        self.run(params, Gating::Sparse(mask), batch, true)
            .map(|(loss, cache)| (loss, cache.expect("cache requested")))
    }

    /// Sparse forward that keeps nothing for backward.
    pub fn loss(&self, params: &NetworkParams, mask: &Mask, batch: &Batch) -> Result<f64> {
        self.check_mask(mask)?;
        self.run(params, Gating::Sparse(mask), batch, false).map(|r| r.0)
    }

    /// Dense forward where channel `c`'s output is multiplied by `gates[c]`.
    /// All channels are computed regardless of the gate values.
    pub fn forward_gated(&self, params: &NetworkParams, gates: &[f64], batch: &Batch) -> Result<(f64, ForwardCache)> {
        if gates.len() != self.num_channels {
            return Err(Error::Input(format!(
                "{} gates for {} channels",
                gates.len(),
                self.num_channels
            )));
        }
        self.run(params, Gating::Dense(gates), batch, true)
            .map(|(loss, cache)| (loss, cache.expect("cache requested")))
    }

    /// Logits under `mask`, no cache.
    pub fn logits(&self, params: &NetworkParams, mask: &Mask, x: &Tensor) -> Result<Tensor> {
        self.check_mask(mask)?;
        let labels = vec![0; x.shape().first().copied().unwrap_or(0)];
        let batch = Batch { x: x.clone(), labels };
        self.check_batch(&batch.x, &batch.labels)?;
        let (logits, _) = self.propagate(params, Gating::Sparse(mask), &batch.x, false)?;
        Ok(logits)
    }

    fn run(&self, params: &NetworkParams, gating: Gating<'_>, batch: &Batch, keep: bool) -> Result<(f64, Option<ForwardCache>)> {
        self.check_params(params)?;
        self.check_batch(&batch.x, &batch.labels)?;
        let (logits, caches) = self.propagate(params, gating, &batch.x, keep)?;
        let (loss, grad_logits) = tensor::softmax_cross_entropy(&logits, &batch.labels)?;
        let cache = keep.then(|| ForwardCache {
            layers: caches,
            grad_logits,
            stamp: params.stamp,
            dense: matches!(gating, Gating::Dense(_)),
            gates: match gating {
                Gating::Dense(g) => Some(g.to_vec()),
                Gating::Sparse(_) => None,
            },
        });
        Ok((loss, cache))
    }

    fn check_params(&self, params: &NetworkParams) -> Result<()> {
        let expected = self.resolved.iter().filter(|l| matches!(l, Layer::Conv { .. } | Layer::Dense { .. } | Layer::Classifier { .. })).count();
        if params.layers.len() != expected {
            return Err(Error::Input(format!(
                "parameters have {} layers, network expects {expected}",
                params.layers.len()
            )));
        }
        Ok(())
    }

    fn propagate(&self, params: &NetworkParams, gating: Gating<'_>, x: &Tensor, keep: bool) -> Result<(Tensor, Vec<LayerCache>)> {
        let mut act = x.clone();
        let mut live = ChannelSet::full(self.input_shape[0]);
        let mut caches = Vec::new();
        for layer in &self.resolved {
            match layer {
                Layer::Conv {
                    geom, channels, param, ..
                } => {
                    let p = &params.layers[*param];
                    let (active, gates) = gating.resolve(channels.clone());
                    let z = tensor::conv2d(&act, &p.weight, geom.stride, geom.padding, &live, &active)?;
                    let (out, cache) = channel_block(z, p, &active, gates, act, live, keep);
                    caches.extend(cache);
                    act = out;
                    live = active;
                }
                Layer::Dense {
                    channels, param, in_spatial, ..
                } => {
                    let p = &params.layers[*param];
                    let (active, gates) = gating.resolve(channels.clone());
                    let batch = act.shape()[0];
                    let in_shape = act.shape().to_vec();
                    let flat = act.reshape(&[batch, p.weight.shape()[1]])?;
                    let live_feat = live.expand(*in_spatial);
                    let z = tensor::linear(&flat, &p.weight, &live_feat, &active)?;
                    let (out, cache) = channel_block(z, p, &active, gates, flat, live, keep);
                    caches.extend(cache.map(|c| match c {
                        LayerCache::Param(mut pc) => {
                            pc.input_shape = in_shape;
                            LayerCache::Param(pc)
                        }
                        other => other,
                    }));
                    act = out;
                    live = active;
                }
                Layer::Classifier {
                    in_spatial, classes, param, ..
                } => {
                    let p = &params.layers[*param];
                    let batch = act.shape()[0];
                    let in_shape = act.shape().to_vec();
                    let flat = act.reshape(&[batch, p.weight.shape()[1]])?;
                    let all = ChannelSet::full(*classes);
                    let mut z = tensor::linear(&flat, &p.weight, &live.expand(*in_spatial), &all)?;
                    add_bias(&mut z, &p.bias, &all);
                    if keep {
                        caches.push(LayerCache::Param(ParamCache {
                            input: flat,
                            input_shape: in_shape,
                            live_in: live.clone(),
                            active_out: all,
                            pre_affine: None,
                            pre_gate: None,
                            gates: None,
                        }));
                    }
                    act = z;
                    live = ChannelSet::full(*classes);
                }
                Layer::Relu => {
                    let out = tensor::relu(&act);
                    if keep {
                        caches.push(LayerCache::Relu { pre: act });
                    }
                    act = out;
                }
                Layer::MaxPool => {
                    let (out, argmax) = tensor::maxpool2(&act, &live)?;
                    if keep {
                        caches.push(LayerCache::Pool {
                            argmax,
                            input_shape: act.shape().to_vec(),
                        });
                    }
                    act = out;
                }
            }
        }
        Ok((act, caches))
    }

    /// Gradient of the cached minibatch loss w.r.t. every weight. Blocks
    /// belonging to channels that were pruned in the forward pass are exactly
    /// zero and are never computed.
    pub fn backward_weights(&self, params: &NetworkParams, cache: &ForwardCache) -> Result<WeightGrad> {
        self.backward(params, cache).map(|b| b.weights)
    }

    /// Full backward pass. For gated caches also returns ∂L/∂gate per global
    /// channel.
    pub fn backward(&self, params: &NetworkParams, cache: &ForwardCache) -> Result<Backward> {
        if cache.stamp != params.stamp {
            return Err(Error::Contract(
                "forward cache is stale: parameters changed since the forward pass".into(),
            ));
        }
        self.check_params(params)?;
        let mut grads: Vec<LayerParams> = params.layers.iter().map(LayerParams::zeros_like).collect();
        let mut gate_grad = cache.dense.then(|| vec![0.0; self.num_channels]);
        let mut grad = cache.grad_logits.clone();
        let mut caches = cache.layers.iter().rev();
        let first_param = 0;
        for layer in self.resolved.iter().rev() {
            match layer {
                Layer::Relu => {
                    let Some(LayerCache::Relu { pre }) = caches.next() else {
                        return Err(corrupt_cache());
                    };
                    grad = tensor::relu_backward(&grad, pre)?;
                }
                Layer::MaxPool => {
                    let Some(LayerCache::Pool { argmax, input_shape }) = caches.next() else {
                        return Err(corrupt_cache());
                    };
                    grad = tensor::maxpool2_backward(&grad, argmax, input_shape);
                }
                Layer::Conv {
                    geom, channels, param, ..
                } => {
                    let Some(LayerCache::Param(c)) = caches.next() else {
                        return Err(corrupt_cache());
                    };
                    let p = &params.layers[*param];
                    let g = &mut grads[*param];
                    grad = block_backward(grad, c, p, g, channels.start, gate_grad.as_deref_mut());
                    g.weight = tensor::conv2d_backward_filters(
                        &grad,
                        &c.input,
                        p.weight.shape(),
                        geom.stride,
                        geom.padding,
                        &c.live_in,
                        &c.active_out,
                    )?;
                    grad = if *param == first_param {
                        Tensor::zeros(c.input.shape())
                    } else {
                        tensor::conv2d_backward_input(
                            &grad,
                            &p.weight,
                            c.input.shape(),
                            geom.stride,
                            geom.padding,
                            &c.live_in,
                            &c.active_out,
                        )?
                    };
                }
                Layer::Dense {
                    channels: Range { start: offset, .. },
                    param,
                    in_spatial,
                    ..
                }
                | Layer::Classifier {
                    in_spatial,
                    param,
                    in_channels: offset,
                    ..
                } => {
                    let Some(LayerCache::Param(c)) = caches.next() else {
                        return Err(corrupt_cache());
                    };
                    // The classifier is never gated, so its offset is unused.
                    let p = &params.layers[*param];
                    let g = &mut grads[*param];
                    grad = block_backward(grad, c, p, g, *offset, gate_grad.as_deref_mut());
                    let live_feat = c.live_in.expand(*in_spatial);
                    g.weight = tensor::linear_backward_weights(&grad, &c.input, &live_feat, &c.active_out)?;
                    grad = if *param == first_param {
                        Tensor::zeros(&c.input_shape)
                    } else {
                        tensor::linear_backward_input(&grad, &p.weight, &live_feat, &c.active_out)?
                            .reshape(&c.input_shape)?
                    };
                }
            }
        }
        Ok(Backward {
            weights: WeightGrad { layers: grads },
            gates: gate_grad,
        })
    }

    /// Mean loss and accuracy of `params` under `mask` over `rows` of a
    /// dataset, evaluated in chunks of `chunk` rows.
    pub fn evaluate(&self, params: &NetworkParams, mask: &Mask, x: &Tensor, labels: &[usize], rows: &[usize], chunk: usize) -> Result<Evaluation> {
        let mut loss = 0.0;
        let mut correct = 0usize;
        for part in rows.chunks(chunk.max(1)) {
            let xb = x.select_rows(part);
            let yb: Vec<usize> = part.iter().map(|&r| labels[r]).collect();
            let logits = self.logits(params, mask, &xb)?;
            let (l, _) = tensor::softmax_cross_entropy(&logits, &yb)?;
            loss += l * part.len() as f64;
            correct += argmax_rows(&logits).iter().zip(&yb).filter(|(p, y)| p == y).count();
        }
        let n = rows.len().max(1) as f64;
        Ok(Evaluation {
            loss: loss / n,
            accuracy: correct as f64 / n,
        })
    }

    /// Number of parameters that survive `mask`, and the dense total.
    pub fn param_counts(&self, mask: &Mask) -> Result<(usize, usize)> {
        let sets = self.active_sets(mask)?;
        let mut sparse = 0;
        let mut dense = 0;
        let mut idx = 0;
        for layer in &self.resolved {
            let (per_pair, per_out, n_in, n_out) = match *layer {
                Layer::Conv {
                    geom,
                    in_channels,
                    out_channels,
                    affine,
                    ..
                } => (geom.kernel * geom.kernel, 1 + 2 * affine as usize, in_channels, out_channels),
                Layer::Dense {
                    in_channels,
                    in_spatial,
                    units,
                    affine,
                    ..
                } => (in_spatial, 1 + 2 * affine as usize, in_channels, units),
                Layer::Classifier {
                    in_channels,
                    in_spatial,
                    classes,
                    ..
                } => (in_spatial, 1, in_channels, classes),
                Layer::Relu | Layer::MaxPool => continue,
            };
            let (ai, ao) = &sets[idx];
            idx += 1;
            sparse += ai.len() * ao.len() * per_pair + ao.len() * per_out;
            dense += n_in * n_out * per_pair + n_out * per_out;
        }
        Ok((sparse, dense))
    }
}

fn corrupt_cache() -> Error {
    Error::Contract("forward cache does not match this network".into())
}

pub(crate) fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

#[derive(Clone, Copy)]
enum Gating<'a> {
    Sparse(&'a Mask),
    Dense(&'a [f64]),
}

impl<'a> Gating<'a> {
    /// Output channel set to compute and optional per-channel gate values.
    fn resolve(&self, range: Range<usize>) -> (ChannelSet, Option<&'a [f64]>) {
        match *self {
            Gating::Sparse(mask) => (mask.local_active(range), None),
            Gating::Dense(gates) => (ChannelSet::full(range.len()), Some(&gates[range])),
        }
    }
}

/// Size of one output channel in a `[B, C, ...]` tensor.
fn channel_stride(t: &Tensor) -> (usize, usize, usize) {
    let shape = t.shape();
    let spatial: usize = shape[2..].iter().product();
    (shape[0], shape[1], spatial)
}

fn add_bias(z: &mut Tensor, bias: &[f64], active: &ChannelSet) {
    let (batch, c, sp) = channel_stride(z);
    let data = z.data_mut();
    for b in 0..batch {
        for o in active.iter() {
            let base = (b * c + o) * sp;
            for v in &mut data[base..base + sp] {
                *v += bias[o];
            }
        }
    }
}

/// Per-channel affine `v ↦ scale·v + shift` over active channels.
fn apply_affine(z: &mut Tensor, scale: &[f64], shift: &[f64], active: &ChannelSet) {
    let (batch, c, sp) = channel_stride(z);
    let data = z.data_mut();
    for b in 0..batch {
        for o in active.iter() {
            let base = (b * c + o) * sp;
            for v in &mut data[base..base + sp] {
                *v = scale[o] * *v + shift[o];
            }
        }
    }
    meter::add_elementwise((batch * active.len() * sp) as u64);
}

fn apply_gates(z: &mut Tensor, gates: &[f64]) {
    let (batch, c, sp) = channel_stride(z);
    let data = z.data_mut();
    for b in 0..batch {
        for (o, &g) in gates.iter().enumerate() {
            let base = (b * c + o) * sp;
            for v in &mut data[base..base + sp] {
                *v *= g;
            }
        }
    }
    meter::add_elementwise((batch * c * sp) as u64);
}

/// Bias, optional affine, optional gate, for a maskable layer's output.
fn channel_block(
    mut z: Tensor,
    p: &LayerParams,
    active: &ChannelSet,
    gates: Option<&[f64]>,
    input: Tensor,
    live_in: ChannelSet,
    keep: bool,
) -> (Tensor, Option<LayerCache>) {
    add_bias(&mut z, &p.bias, active);
    let pre_affine = match (&p.scale, &p.shift) {
        (Some(scale), Some(shift)) => {
            let before = keep.then(|| z.clone());
            apply_affine(&mut z, scale, shift, active);
            before
        }
        _ => None,
    };
    let pre_gate = match gates {
        Some(g) => {
            let before = keep.then(|| z.clone());
            apply_gates(&mut z, g);
            before
        }
        None => None,
    };
    let cache = keep.then(|| {
        LayerCache::Param(ParamCache {
            input_shape: input.shape().to_vec(),
            input,
            live_in,
            active_out: active.clone(),
            pre_affine,
            pre_gate,
            gates: gates.map(<[f64]>::to_vec),
        })
    });
    (z, cache)
}

/// Undoes gate, affine and bias for one parameterized layer, filling bias,
/// scale and shift gradients. Returns the gradient w.r.t. the raw product.
fn block_backward(
    mut grad: Tensor,
    c: &ParamCache,
    p: &LayerParams,
    g: &mut LayerParams,
    channel_offset: usize,
    gate_grad: Option<&mut [f64]>,
) -> Tensor {
    let (batch, nc, sp) = channel_stride(&grad);
    if let (Some(gates), Some(pre_gate)) = (&c.gates, &c.pre_gate) {
        let gg = gate_grad.expect("gated cache carries gate gradients");
        let data = grad.data_mut();
        for b in 0..batch {
            for (o, &gate) in gates.iter().enumerate() {
                let base = (b * nc + o) * sp;
                let mut acc = 0.0;
                for (d, &y) in data[base..base + sp].iter_mut().zip(&pre_gate.data()[base..base + sp]) {
                    acc += *d * y;
                    *d *= gate;
                }
                gg[channel_offset + o] += acc;
            }
        }
        meter::add_elementwise((2 * batch * nc * sp) as u64);
    }
    if let (Some(scale), Some(pre)) = (&p.scale, &c.pre_affine) {
        let gs = g.scale.as_mut().expect("affine grads");
        let gb = g.shift.as_mut().expect("affine grads");
        let data = grad.data_mut();
        for b in 0..batch {
            for o in c.active_out.iter() {
                let base = (b * nc + o) * sp;
                for (d, &v) in data[base..base + sp].iter_mut().zip(&pre.data()[base..base + sp]) {
                    gs[o] += *d * v;
                    gb[o] += *d;
                    *d *= scale[o];
                }
            }
        }
        meter::add_elementwise((2 * batch * c.active_out.len() * sp) as u64);
    }
    let data = grad.data();
    for b in 0..batch {
        for o in c.active_out.iter() {
            let base = (b * nc + o) * sp;
            g.bias[o] += data[base..base + sp].iter().sum::<f64>();
        }
    }
    grad
}

static STAMPS: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    STAMPS.fetch_add(1, Ordering::Relaxed)
}

/// Weights of one conv/dense/classifier layer. Also used for gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// `[out, in, k, k]` for conv, `[out, in_features]` for dense.
    pub weight: Tensor,
    pub bias: Vec<f64>,
    pub scale: Option<Vec<f64>>,
    pub shift: Option<Vec<f64>>,
}

impl LayerParams {
    fn zeros_like(p: &LayerParams) -> LayerParams {
        LayerParams {
            weight: Tensor::zeros(p.weight.shape()),
            bias: vec![0.0; p.bias.len()],
            scale: p.scale.as_ref().map(|v| vec![0.0; v.len()]),
            shift: p.shift.as_ref().map(|v| vec![0.0; v.len()]),
        }
    }

    fn for_each_pair(&mut self, other: &LayerParams, mut f: impl FnMut(&mut f64, f64)) {
        for (a, &b) in self.weight.data_mut().iter_mut().zip(other.weight.data()) {
            f(a, b);
        }
        for (a, &b) in self.bias.iter_mut().zip(&other.bias) {
            f(a, b);
        }
        if let (Some(a), Some(b)) = (&mut self.scale, &other.scale) {
            a.iter_mut().zip(b).for_each(|(x, &y)| f(x, y));
        }
        if let (Some(a), Some(b)) = (&mut self.shift, &other.shift) {
            a.iter_mut().zip(b).for_each(|(x, &y)| f(x, y));
        }
    }

    fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.weight
            .data()
            .iter()
            .chain(&self.bias)
            .chain(self.scale.iter().flatten())
            .chain(self.shift.iter().flatten())
            .copied()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkParams {
    pub layers: Vec<LayerParams>,
    #[serde(skip, default = "fresh_stamp")]
    stamp: u64,
}

impl PartialEq for NetworkParams {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl NetworkParams {
    pub fn from_layers(layers: Vec<LayerParams>) -> Self {
        NetworkParams {
            layers,
            stamp: fresh_stamp(),
        }
    }

    /// Mutable access; invalidates outstanding forward caches.
    pub fn layers_mut(&mut self) -> &mut [LayerParams] {
        self.stamp = fresh_stamp();
        &mut self.layers
    }

    /// `w ← w − lr·grad`.
    pub fn sgd_step(&mut self, grad: &WeightGrad, lr: f64) {
        let mut n = 0u64;
        for (p, g) in self.layers_mut().iter_mut().zip(&grad.layers) {
            p.for_each_pair(g, |w, d| {
                *w -= lr * d;
                n += 1;
            });
        }
        meter::add_elementwise(n);
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.values().all(f64::is_finite))
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.values().count()).sum()
    }
}

/// Weight gradient with the same layout as [`NetworkParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct WeightGrad {
    pub layers: Vec<LayerParams>,
}

impl WeightGrad {
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(LayerParams::values)
    }
}

#[derive(Debug, Clone)]
pub struct Backward {
    pub weights: WeightGrad,
    /// ∂L/∂gate per global channel, only for gated forward caches.
    pub gates: Option<Vec<f64>>,
}

/// Binary channel mask over the global registry.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mask {
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(bits: Vec<bool>) -> Self {
        Mask { bits }
    }

    pub fn ones(n: usize) -> Self {
        Mask { bits: vec![true; n] }
    }

    pub fn zeros(n: usize) -> Self {
        Mask { bits: vec![false; n] }
    }

    /// Mask whose bits are the low `n` bits of `code` (bit j ↦ channel j).
    pub fn from_code(code: u64, n: usize) -> Self {
        Mask {
            bits: (0..n).map(|j| code >> j & 1 == 1).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, j: usize) -> bool {
        self.bits[j]
    }

    pub fn set(&mut self, j: usize, on: bool) {
        self.bits[j] = on;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Active channels within `range`, renumbered from zero.
    pub fn local_active(&self, range: Range<usize>) -> ChannelSet {
        let start = range.start;
        ChannelSet::from_indices(range.filter(|&j| self.bits[j]).map(|j| j - start).collect())
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
struct ParamCache {
    input: Tensor,
    input_shape: Vec<usize>,
    live_in: ChannelSet,
    active_out: ChannelSet,
    pre_affine: Option<Tensor>,
    pre_gate: Option<Tensor>,
    gates: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
enum LayerCache {
    Param(ParamCache),
    Relu { pre: Tensor },
    Pool { argmax: Vec<usize>, input_shape: Vec<usize> },
}

/// Everything a backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    grad_logits: Tensor,
    stamp: u64,
    dense: bool,
    gates: Option<Vec<f64>>,
}

impl ForwardCache {
    /// True when produced by [`NetworkSpec::forward_gated`].
    pub fn is_dense(&self) -> bool {
        self.dense
    }

    pub fn gates(&self) -> Option<&[f64]> {
        self.gates.as_deref()
    }
}
