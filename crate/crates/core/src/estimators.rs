//! Gradient estimators for the structure parameters.
//!
//! * [`vr_pge`]: two-sample, preconditioned score-function estimator. Needs
//!   only two sparse forward passes.
//! * [`pge`]: plain score-function estimator, unbiased but high variance.
//! * [`ste_baseline`]: straight-through chain rule through the mask. Needs a
//!   dense forward and backward pass.
//!
//! For models small enough to enumerate every mask, [`enumerate_expectation`]
//! and [`exact_moments`] give exact expectations and variances; for larger
//! ones [`variance_report`] estimates the same quantities by Monte Carlo.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ForwardCache, Mask, NetworkParams, NetworkSpec};
use crate::structure::{preconditioner, score, SeededSampler, StructureVector};

/// Largest |C| accepted by the enumeration routines.
pub const MAX_ENUMERATION_CHANNELS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    VrPge,
    Pge,
    Ste,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradEstimate {
    pub g: Vec<f64>,
    pub kind: EstimatorKind,
    /// Losses the estimate was built from, in call order.
    pub losses: Vec<f64>,
}

/// `(loss1 − loss2) · H^α(s) · ∇_s ln p(m1|s)`.
///
/// Both losses must come from the same minibatch with independent masks drawn
/// from `p(·|s)`; `m1` is the mask that produced `loss1`.
pub fn vr_pge(loss1: f64, loss2: f64, m1: &Mask, s: &StructureVector, alpha: f64) -> Result<GradEstimate> {
    let sc = score(m1, s)?;
    let h = preconditioner(s, alpha);
    let diff = loss1 - loss2;
    Ok(GradEstimate {
        g: sc.iter().zip(&h).map(|(a, b)| diff * b * a).collect(),
        kind: EstimatorKind::VrPge,
        losses: vec![loss1, loss2],
    })
}

/// `loss · ∇_s ln p(m|s)`.
pub fn pge(loss: f64, m: &Mask, s: &StructureVector) -> Result<GradEstimate> {
    let sc = score(m, s)?;
    Ok(GradEstimate {
        g: sc.into_iter().map(|v| loss * v).collect(),
        kind: EstimatorKind::Pge,
        losses: vec![loss],
    })
}

/// Straight-through gradient: `∂L/∂m_c` from a dense backward pass with
/// `∂m/∂s` taken as 1. Pruned channels generally receive nonzero values.
///
/// `cache` must come from [`NetworkSpec::forward_gated`]; a sparse cache
/// lacks the pruned channels' activations and is rejected.
pub fn ste_baseline(
    spec: &NetworkSpec,
    params: &NetworkParams,
    cache: &ForwardCache,
    s: &StructureVector,
) -> Result<GradEstimate> {
    if !cache.is_dense() {
        return Err(Error::Contract(
            "straight-through gradients need a dense (gated) forward cache; pruned channels were skipped".into(),
        ));
    }
    if s.len() != spec.num_channels() {
        return Err(Error::Dimension {
            op: "ste_baseline",
            lhs: vec![s.len()],
            rhs: vec![spec.num_channels()],
        });
    }
    let back = spec.backward(params, cache)?;
    Ok(GradEstimate {
        g: back.gates.expect("dense cache yields gate gradients"),
        kind: EstimatorKind::Ste,
        losses: Vec::new(),
    })
}

/// Loss and probability of every mask, indexed by [`Mask::from_code`] order.
#[derive(Debug, Clone)]
pub struct LossTable {
    n: usize,
    losses: Vec<f64>,
    probs: Vec<f64>,
}

impl LossTable {
    pub fn build(s: &StructureVector, mut model: impl FnMut(&Mask) -> Result<f64>) -> Result<Self> {
        let n = s.len();
        if n > MAX_ENUMERATION_CHANNELS {
            return Err(Error::param(
                "channels",
                format!("{n} channels exceed the enumeration limit of {MAX_ENUMERATION_CHANNELS}"),
            ));
        }
        let mut losses = Vec::with_capacity(1 << n);
        let mut probs = Vec::with_capacity(1 << n);
        for code in 0..1u64 << n {
            let m = Mask::from_code(code, n);
            losses.push(model(&m)?);
            probs.push(
                s.values()
                    .iter()
                    .enumerate()
                    .map(|(j, &p)| if m.get(j) { p } else { 1.0 - p })
                    .product(),
            );
        }
        Ok(LossTable { n, losses, probs })
    }

    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }

    /// `Φ(s) = E L(m)`.
    pub fn mean(&self) -> f64 {
        self.losses.iter().zip(&self.probs).map(|(l, p)| l * p).sum()
    }

    /// `E L²(m)`.
    pub fn second_moment(&self) -> f64 {
        self.losses.iter().zip(&self.probs).map(|(l, p)| l * l * p).sum()
    }

    /// Exact `∇Φ(s)` via `∂Φ/∂s_j = E[L | m_j = 1] − E[L | m_j = 0]`.
    pub fn grad_phi(&self, s: &StructureVector) -> Vec<f64> {
        (0..self.n)
            .map(|j| {
                let sj = s.values()[j];
                let (mut on, mut off) = (0.0, 0.0);
                for (code, (&l, &p)) in self.losses.iter().zip(&self.probs).enumerate() {
                    if code >> j & 1 == 1 {
                        on += p / sj * l;
                    } else {
                        off += p / (1.0 - sj) * l;
                    }
                }
                on - off
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expectation {
    /// Exact expectation of the chosen estimator.
    pub estimate: Vec<f64>,
    /// Exact `∇Φ(s)` from the conditional-expectation identity.
    pub grad_phi: Vec<f64>,
    /// `H^α(s)` diagonal (all ones for PGE).
    pub preconditioner: Vec<f64>,
}

impl Expectation {
    /// Max-abs gap between `estimate` and `preconditioner ∘ grad_phi`.
    pub fn residual(&self) -> f64 {
        self.estimate
            .iter()
            .zip(&self.grad_phi)
            .zip(&self.preconditioner)
            .map(|((e, g), h)| (e - h * g).abs())
            .fold(0.0, f64::max)
    }
}

/// Exact expectation of an estimator by enumerating every mask (and every
/// mask pair for VR-PGE) weighted by `p(m|s)`.
pub fn enumerate_expectation(
    model: impl FnMut(&Mask) -> Result<f64>,
    s: &StructureVector,
    alpha: f64,
    kind: EstimatorKind,
) -> Result<Expectation> {
    let table = LossTable::build(s, model)?;
    let n = s.len();
    let masks: Vec<Mask> = (0..table.len() as u64).map(|c| Mask::from_code(c, n)).collect();
    let mut estimate = vec![0.0; n];
    let h = match kind {
        EstimatorKind::VrPge => {
            for (m, (&lm, &pm)) in masks.iter().zip(table.losses.iter().zip(&table.probs)) {
                for (&lp, &pp) in table.losses.iter().zip(&table.probs) {
                    let g = vr_pge(lm, lp, m, s, alpha)?;
                    for (e, v) in estimate.iter_mut().zip(&g.g) {
                        *e += pm * pp * v;
                    }
                }
            }
            preconditioner(s, alpha)
        }
        EstimatorKind::Pge => {
            for (m, (&lm, &pm)) in masks.iter().zip(table.losses.iter().zip(&table.probs)) {
                let g = pge(lm, m, s)?;
                for (e, v) in estimate.iter_mut().zip(&g.g) {
                    *e += pm * v;
                }
            }
            vec![1.0; n]
        }
        EstimatorKind::Ste => {
            return Err(Error::param("estimator", "the straight-through estimator is not a function of the mask alone"));
        }
    };
    Ok(Expectation {
        estimate,
        grad_phi: table.grad_phi(s),
        preconditioner: h,
    })
}

/// Per-channel term of the variance bound:
/// `s^{2α}(1−s)^{2α−1} + s^{2α−1}(1−s)^{2α}`.
pub fn bound_term(s: f64, alpha: f64) -> f64 {
    s.powf(2.0 * alpha) * (1.0 - s).powf(2.0 * alpha - 1.0) + s.powf(2.0 * alpha - 1.0) * (1.0 - s).powf(2.0 * alpha)
}

/// Exact second-order quantities of both estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactMoments {
    pub var_pge: Vec<f64>,
    pub var_vr: Vec<f64>,
    pub var_pge_total: f64,
    pub var_vr_total: f64,
    /// `E ‖G‖²` of VR-PGE, which the bound controls directly.
    pub vr_second_moment: f64,
    /// `V(s) = E_m E_m' (L(m) − L(m'))²`.
    pub v: f64,
    /// Max over `j` and `m_j ∈ {0,1}` of the flipped-coordinate analogue of `V`.
    pub v_max: f64,
    pub el2: f64,
    /// `V_max · Σ_j bound_term(s_j, α)`.
    pub bound: f64,
}

pub fn exact_moments(
    model: impl FnMut(&Mask) -> Result<f64>,
    s: &StructureVector,
    alpha: f64,
) -> Result<ExactMoments> {
    let table = LossTable::build(s, model)?;
    let n = s.len();
    let el2 = table.second_moment();
    let grad = table.grad_phi(s);
    let h = preconditioner(s, alpha);
    // A(m) = E_m' (L(m) − L(m'))², summed directly so equal losses give 0.
    let pair_gap: Vec<f64> = table
        .losses
        .iter()
        .map(|&l| table.losses.iter().zip(&table.probs).map(|(&lp, &pp)| pp * (l - lp).powi(2)).sum())
        .collect();

    let mut pge_sq = vec![0.0; n];
    let mut vr_sq = vec![0.0; n];
    for (code, ((&l, &p), &a)) in table.losses.iter().zip(&table.probs).zip(&pair_gap).enumerate() {
        let m = Mask::from_code(code as u64, n);
        let sc = score(&m, s)?;
        for j in 0..n {
            pge_sq[j] += p * (l * sc[j]).powi(2);
            vr_sq[j] += p * a * (h[j] * sc[j]).powi(2);
        }
    }
    let var_pge: Vec<f64> = (0..n).map(|j| (pge_sq[j] - grad[j] * grad[j]).max(0.0)).collect();
    let var_vr: Vec<f64> = (0..n).map(|j| (vr_sq[j] - (h[j] * grad[j]).powi(2)).max(0.0)).collect();

    let v = table.probs.iter().zip(&pair_gap).map(|(p, a)| p * a).sum();
    let mut v_max = f64::NEG_INFINITY;
    for j in 0..n {
        let sj = s.values()[j];
        for bit in [0u64, 1] {
            let mut acc = 0.0;
            for (code, (&p, &a)) in table.probs.iter().zip(&pair_gap).enumerate() {
                if (code as u64 >> j & 1) == bit {
                    // p(m_{-j}) = p(m) / p(m_j)
                    let pj = if bit == 1 { sj } else { 1.0 - sj };
                    acc += p / pj * a;
                }
            }
            v_max = v_max.max(acc);
        }
    }
    let v_max = if n == 0 { 0.0 } else { v_max };
    let bound = v_max * s.values().iter().map(|&sj| bound_term(sj, alpha)).sum::<f64>();
    Ok(ExactMoments {
        var_pge_total: var_pge.iter().sum(),
        var_vr_total: var_vr.iter().sum(),
        vr_second_moment: vr_sq.iter().sum(),
        var_pge,
        var_vr,
        v,
        v_max,
        el2,
        bound,
    })
}

/// Monte-Carlo counterpart of [`ExactMoments`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub n_samples: usize,
    pub alpha: f64,
    pub var_pge: Vec<f64>,
    pub var_vr: Vec<f64>,
    pub var_pge_total: f64,
    pub var_vr_total: f64,
    /// Standard error of `var_vr_total`.
    pub var_vr_total_se: f64,
    pub v_hat: f64,
    pub vmax_hat: f64,
    pub el2_hat: f64,
    pub bound_value: f64,
}

impl VarianceReport {
    pub fn variance_ratio(&self) -> f64 {
        self.var_pge_total / self.var_vr_total
    }
}

fn sample_variance(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let dim = rows.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; dim];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m).powi(2) / (n - 1.0);
        }
    }
    (mean, var)
}

/// Monte-Carlo variance diagnostics with `n_samples` independent mask pairs.
///
/// `vmax_hat` reuses each sampled pair and forces coordinate `j` of the first
/// mask to each bit value, so it costs `|C|·n_samples` extra loss
/// evaluations.
pub fn variance_report(
    mut model: impl FnMut(&Mask) -> Result<f64>,
    s: &StructureVector,
    alpha: f64,
    n_samples: usize,
    sampler: &mut SeededSampler,
) -> Result<VarianceReport> {
    if n_samples < 100 {
        return Err(Error::param("n_samples", format!("{n_samples} < 100")));
    }
    let n = s.len();
    let mut pairs = Vec::with_capacity(n_samples);
    let mut vr_rows = Vec::with_capacity(n_samples);
    let mut pge_rows = Vec::with_capacity(n_samples);
    let mut gaps = Vec::with_capacity(n_samples);
    let mut squares = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let m = sampler.sample_mask(s);
        let mp = sampler.sample_mask(s);
        let (l, lp) = (model(&m)?, model(&mp)?);
        vr_rows.push(vr_pge(l, lp, &m, s, alpha)?.g);
        pge_rows.push(pge(l, &m, s)?.g);
        gaps.push((l - lp).powi(2));
        squares.push(l * l);
        pairs.push((m, l, lp));
    }
    let (vr_mean, var_vr) = sample_variance(&vr_rows);
    let (_, var_pge) = sample_variance(&pge_rows);
    let var_vr_total: f64 = var_vr.iter().sum();
    let dev: Vec<f64> = vr_rows
        .iter()
        .map(|r| r.iter().zip(&vr_mean).map(|(v, m)| (v - m).powi(2)).sum())
        .collect();
    let dev_mean = dev.iter().sum::<f64>() / n_samples as f64;
    let dev_var = dev.iter().map(|d| (d - dev_mean).powi(2)).sum::<f64>() / (n_samples as f64 - 1.0);
    let var_vr_total_se = (dev_var / n_samples as f64).sqrt();

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let v_hat = mean(&gaps);
    let mut vmax_hat = if n == 0 { 0.0 } else { f64::NEG_INFINITY };
    for j in 0..n {
        let mut acc = [0.0f64; 2];
        for (m, l, lp) in &pairs {
            for (bit, slot) in acc.iter_mut().enumerate() {
                let want = bit == 1;
                let lf = if m.get(j) == want {
                    *l
                } else {
                    let mut flipped = m.clone();
                    flipped.set(j, want);
                    model(&flipped)?
                };
                *slot += (lf - lp).powi(2);
            }
        }
        vmax_hat = vmax_hat.max(acc[0].max(acc[1]) / n_samples as f64);
    }
    let bound_value = vmax_hat * s.values().iter().map(|&sj| bound_term(sj, alpha)).sum::<f64>();
    Ok(VarianceReport {
        n_samples,
        alpha,
        var_pge_total: var_pge.iter().sum(),
        var_pge,
        var_vr,
        var_vr_total,
        var_vr_total_se,
        v_hat,
        vmax_hat,
        el2_hat: mean(&squares),
        bound_value,
    })
}
