//! Estimator diagnostics for a fixed model and structure vector: exact
//! unbiasedness residuals and variances when the channel count allows
//! enumeration, Monte-Carlo estimates always.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::estimators::{
    enumerate_expectation, exact_moments, variance_report, EstimatorKind, ExactMoments, VarianceReport,
    MAX_ENUMERATION_CHANNELS,
};
use crate::network::{Batch, Mask, NetworkParams, NetworkSpec};
use crate::structure::{SeededSampler, StructureVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticMode {
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub channels: usize,
    pub alpha: f64,
    pub mode: DiagnosticMode,
    /// Set when enumeration was skipped.
    pub banner: Option<String>,
    /// Max-abs gap between `E[VR-PGE]` and `H^α ∇Φ`.
    pub residual_vr: Option<f64>,
    /// Max-abs gap between `E[PGE]` and `∇Φ`.
    pub residual_pge: Option<f64>,
    pub exact: Option<ExactMoments>,
    pub sampled: VarianceReport,
    /// Total PGE variance over total VR-PGE variance; exact when available.
    pub variance_ratio: f64,
    /// Variance bound minus total VR-PGE variance; exact when available.
    pub bound_slack: f64,
    pub v_hat: f64,
    pub vmax_hat: f64,
    pub el2_hat: f64,
}

/// Runs every diagnostic on `model` at `s`.
pub fn diagnose(
    mut model: impl FnMut(&Mask) -> Result<f64>,
    s: &StructureVector,
    alpha: f64,
    n_samples: usize,
    sampler: &mut SeededSampler,
) -> Result<DiagnosticReport> {
    let n = s.len();
    let sampled = variance_report(&mut model, s, alpha, n_samples, sampler)?;
    let (mode, banner, residual_vr, residual_pge, exact) = if n <= MAX_ENUMERATION_CHANNELS {
        let vr = enumerate_expectation(&mut model, s, alpha, EstimatorKind::VrPge)?;
        let pg = enumerate_expectation(&mut model, s, alpha, EstimatorKind::Pge)?;
        let ex = exact_moments(&mut model, s, alpha)?;
        (DiagnosticMode::Exact, None, Some(vr.residual()), Some(pg.residual()), Some(ex))
    } else {
        let banner = format!(
            "{n} channels exceed the enumeration limit of {MAX_ENUMERATION_CHANNELS}; \
             reporting Monte-Carlo estimates from {n_samples} mask pairs only"
        );
        log::warn!("{banner}");
        (DiagnosticMode::MonteCarlo, Some(banner), None, None, None)
    };
    let (variance_ratio, bound_slack) = match &exact {
        Some(ex) => (ratio(ex.var_pge_total, ex.var_vr_total), ex.bound - ex.var_vr_total),
        None => (
            ratio(sampled.var_pge_total, sampled.var_vr_total),
            sampled.bound_value - sampled.var_vr_total,
        ),
    };
    Ok(DiagnosticReport {
        channels: n,
        alpha,
        mode,
        banner,
        residual_vr,
        residual_pge,
        variance_ratio,
        bound_slack,
        v_hat: sampled.v_hat,
        vmax_hat: sampled.vmax_hat,
        el2_hat: sampled.el2_hat,
        exact,
        sampled,
    })
}

/// `0/0` reads as 1: two zero-variance estimators are equally good.
fn ratio(a: f64, b: f64) -> f64 {
    if a == 0.0 && b == 0.0 {
        1.0
    } else {
        a / b
    }
}

/// Minibatch loss of a fixed network on a fixed batch as a function of the
/// mask.
pub fn network_model<'a>(spec: &'a NetworkSpec, params: &'a NetworkParams, batch: &'a Batch) -> impl FnMut(&Mask) -> Result<f64> + 'a {
    move |m| spec.loss(params, m, batch)
}
