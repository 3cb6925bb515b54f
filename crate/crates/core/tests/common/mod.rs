#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cst_core::network::{Batch, Layer, LayerSpec, Mask, NetworkParams, NetworkSpec};
use cst_core::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Three conv layers (the first with per-channel affine), a max-pool and the
/// automatic classifier.
pub fn conv3() -> NetworkSpec {
    NetworkSpec::new(
        vec![3, 8, 8],
        4,
        vec![
            LayerSpec::Conv { out_channels: 6, kernel: 3, stride: 1, padding: 1, affine: true },
            LayerSpec::Relu,
            LayerSpec::Conv { out_channels: 8, kernel: 3, stride: 1, padding: 1, affine: false },
            LayerSpec::Relu,
            LayerSpec::MaxPool,
            LayerSpec::Conv { out_channels: 8, kernel: 3, stride: 2, padding: 1, affine: false },
            LayerSpec::Relu,
        ],
    )
    .unwrap()
}

/// Conv, pool, then two dense layers.
pub fn mixed() -> NetworkSpec {
    NetworkSpec::new(
        vec![2, 6, 6],
        3,
        vec![
            LayerSpec::Conv { out_channels: 4, kernel: 3, stride: 1, padding: 0, affine: false },
            LayerSpec::Relu,
            LayerSpec::MaxPool,
            LayerSpec::Dense { units: 7, affine: true },
            LayerSpec::Relu,
            LayerSpec::Dense { units: 5, affine: false },
            LayerSpec::Relu,
        ],
    )
    .unwrap()
}

pub fn random_batch(spec: &NetworkSpec, rows: usize, r: &mut impl Rng) -> Batch {
    let mut shape = vec![rows];
    shape.extend_from_slice(spec.input_shape());
    Batch {
        x: Tensor::from_fn(&shape, |_| r.random_range(-1.0..1.0)),
        labels: (0..rows).map(|_| r.random_range(0..spec.classes())).collect(),
    }
}

/// Random mask with every maskable layer keeping at least one channel.
pub fn random_mask(spec: &NetworkSpec, keep: f64, r: &mut impl Rng) -> Mask {
    let mut m = Mask::new((0..spec.num_channels()).map(|_| r.random::<f64>() < keep).collect());
    for g in spec.channel_groups() {
        if !g.clone().any(|c| m.get(c)) {
            m.set(r.random_range(g), true);
        }
    }
    m
}

/// Shifts params slightly away from zero-bias init so ReLU kinks are not hit
/// at exactly zero.
pub fn jitter(params: &mut NetworkParams, r: &mut impl Rng) {
    for l in params.layers_mut() {
        for b in &mut l.bias {
            *b = r.random_range(-0.1..0.1);
        }
    }
}

/// Per parameterized layer: elements per (input channel, output channel)
/// pair of its weight tensor.
pub fn per_pair(spec: &NetworkSpec) -> Vec<usize> {
    spec.layers()
        .iter()
        .filter_map(|l| match *l {
            Layer::Conv { geom, .. } => Some(geom.kernel * geom.kernel),
            Layer::Dense { in_spatial, .. } | Layer::Classifier { in_spatial, .. } => Some(in_spatial),
            _ => None,
        })
        .collect()
}

/// Per parameterized layer: multiply-accumulates per sample per active
/// (input, output) channel pair in the forward pass.
pub fn macs_per_pair(spec: &NetworkSpec) -> Vec<usize> {
    spec.layers()
        .iter()
        .filter_map(|l| match *l {
            Layer::Conv { geom, .. } => Some(geom.kernel * geom.kernel * geom.out_h() * geom.out_w()),
            Layer::Dense { in_spatial, .. } | Layer::Classifier { in_spatial, .. } => Some(in_spatial),
            _ => None,
        })
        .collect()
}
