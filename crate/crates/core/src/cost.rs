//! FLOP accounting for masked networks and the resulting train-cost savings.
//!
//! One FLOP is half a multiply-accumulate: a MAC counts as 2. Backward passes
//! are modeled as twice the forward cost.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::network::{Layer, Mask, NetworkSpec};
use crate::tensor::ChannelSet;

/// Per-sample forward FLOPs of each parameterized layer given its active
/// input/output channel sets.
pub fn layer_flops(spec: &NetworkSpec, active: &[(ChannelSet, ChannelSet)]) -> Vec<f64> {
    let mut out = Vec::with_capacity(active.len());
    let mut idx = 0;
    for layer in spec.layers() {
        let per_pair = match *layer {
            Layer::Conv { geom, .. } => geom.kernel * geom.kernel * geom.out_h() * geom.out_w(),
            Layer::Dense { in_spatial, .. } | Layer::Classifier { in_spatial, .. } => in_spatial,
            Layer::Relu | Layer::MaxPool => continue,
        };
        let (ai, ao) = &active[idx];
        idx += 1;
        out.push(2.0 * (ai.len() * ao.len() * per_pair) as f64);
    }
    out
}

/// `(f_S, f_D)`: per-sample forward FLOPs under `mask` and with every channel
/// active.
pub fn analytic_flops(spec: &NetworkSpec, mask: &Mask) -> Result<(f64, f64)> {
    let sparse = layer_flops(spec, &spec.active_sets(mask)?).iter().sum();
    let dense = layer_flops(spec, &spec.active_sets(&Mask::ones(spec.num_channels()))?)
        .iter()
        .sum();
    Ok((sparse, dense))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Savings {
    /// Dense training cost over ours: `(f_D + 2f_D) / (2f_S + 2f_S)`.
    pub ours: f64,
    /// Dense training cost over a sparse-forward, dense-backward method:
    /// `(f_D + 2f_D) / (f_S + 2f_D)`, which never reaches 1.5.
    pub baseline_bound: f64,
}

/// Train-cost savings for a sparse-to-dense forward FLOPs ratio.
/// `f_sparse = 0` yields infinite savings for our method.
pub fn savings(f_sparse: f64, f_dense: f64) -> Savings {
    let ratio = f_sparse / f_dense;
    if f_sparse <= 0.0 {
        log::warn!("sparse forward FLOPs are zero; reporting unbounded savings");
    }
    Savings {
        ours: if f_sparse <= 0.0 { f64::INFINITY } else { 3.0 / (4.0 * ratio) },
        baseline_bound: 3.0 / (2.0 + ratio),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    /// Dense forward FLOPs per sample.
    pub f_dense: f64,
    /// Sparse forward FLOPs per sample.
    pub f_sparse: f64,
    /// Multiply-accumulates actually executed, if measured.
    pub measured_macs: Option<u64>,
    pub savings_ours: f64,
    pub savings_ste_style: f64,
}

impl FlopsReport {
    pub fn new(f_sparse: f64, f_dense: f64, measured_macs: Option<u64>) -> Self {
        let s = savings(f_sparse, f_dense);
        FlopsReport {
            f_dense,
            f_sparse,
            measured_macs,
            savings_ours: s.ours,
            savings_ste_style: s.baseline_bound,
        }
    }

    pub fn for_mask(spec: &NetworkSpec, mask: &Mask) -> Result<Self> {
        let (fs, fd) = analytic_flops(spec, mask)?;
        Ok(FlopsReport::new(fs, fd, None))
    }

    pub fn ratio(&self) -> f64 {
        self.f_sparse / self.f_dense
    }
}
