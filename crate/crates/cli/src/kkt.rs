//! Exact reference for the budgeted box projection, and a KKT residual.
//!
//! `g(v) = Σ clip(z_i − v, lo, hi) − K` is piecewise linear in `v` with kinks
//! at `z_i − hi` and `z_i − lo`, so the optimal shift is found by evaluating
//! `g` at every kink and interpolating on the bracketing segment. No
//! iteration, no tolerance.

use rand::{Rng, SeedableRng};
use rand::rngs::StdRng;
use serde::Serialize;

use cst_core::structure::project;

fn clipped_sum(z: &[f64], v: f64, lo: f64, hi: f64) -> f64 {
    z.iter().map(|&x| (x - v).clamp(lo, hi)).sum()
}

/// Optimal shift `v ≥ 0` of the projection of `z` onto
/// `{s ∈ [lo,hi]^n : Σ s ≤ K}`.
pub fn optimal_shift(z: &[f64], budget: f64, lo: f64, hi: f64) -> f64 {
    let g = |v: f64| clipped_sum(z, v, lo, hi) - budget;
    if g(0.0) <= 0.0 {
        return 0.0;
    }
    let mut kinks: Vec<f64> = z
        .iter()
        .flat_map(|&x| [x - hi, x - lo])
        .filter(|&v| v > 0.0)
        .collect();
    kinks.push(0.0);
    kinks.sort_by(f64::total_cmp);
    kinks.dedup();
    for w in kinks.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (ga, gb) = (g(a), g(b));
        if ga >= 0.0 && gb <= 0.0 {
            return if ga == gb { a } else { a + (b - a) * ga / (ga - gb) };
        }
    }
    *kinks.last().expect("kinks contains 0")
}

pub fn reference_projection(z: &[f64], budget: f64) -> Vec<f64> {
    let v = optimal_shift(z, budget, 0.0, 1.0);
    z.iter().map(|&x| (x - v).clamp(0.0, 1.0)).collect()
}

/// Largest violation of the optimality conditions of `s` as the projection
/// of `z`: box and budget feasibility, a common shift `v ≥ 0` explaining
/// every free coordinate, bound coordinates on the correct side of it, and
/// complementary slackness.
pub fn kkt_residual(z: &[f64], s: &[f64], budget: f64) -> f64 {
    let mut worst = 0.0_f64;
    for &x in s {
        worst = worst.max(-x).max(x - 1.0);
    }
    let sum: f64 = s.iter().sum();
    worst = worst.max(sum - budget);
    let shifts: Vec<f64> = z
        .iter()
        .zip(s)
        .filter(|(_, &x)| x > 0.0 && x < 1.0)
        .map(|(&zi, &x)| zi - x)
        .collect();
    let v = if shifts.is_empty() {
        // No free coordinate: any v in the admissible interval works; the
        // exact reference gives one.
        optimal_shift(z, budget, 0.0, 1.0)
    } else {
        shifts.iter().sum::<f64>() / shifts.len() as f64
    };
    worst = worst.max(-v);
    for (&zi, &x) in z.iter().zip(s) {
        let r = if x <= 0.0 {
            (zi - v).max(0.0)
        } else if x >= 1.0 {
            (1.0 - (zi - v)).max(0.0)
        } else {
            (zi - v - x).abs()
        };
        worst = worst.max(r);
    }
    worst.max((v * (sum - budget)).abs())
}

#[derive(Debug, Clone, Serialize)]
pub struct ProjectCheck {
    pub trials: usize,
    pub dim: usize,
    pub seed: u64,
    pub max_deviation: f64,
    pub max_kkt_residual: f64,
    pub max_budget_excess: f64,
    pub idempotent: bool,
    pub failures: usize,
}

pub const DEVIATION_TOL: f64 = 1e-6;

/// Projects `trials` random vectors with `dim ≤ max_dim` coordinates in
/// `[-1, 2]` and random budgets (or the fixed `budget_ratio · dim`), comparing
/// against the exact reference.
pub fn run_check(trials: usize, max_dim: usize, seed: u64, budget_ratio: Option<f64>) -> cst_core::Result<ProjectCheck> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut out = ProjectCheck {
        trials,
        dim: max_dim,
        seed,
        max_deviation: 0.0,
        max_kkt_residual: 0.0,
        max_budget_excess: f64::NEG_INFINITY,
        idempotent: true,
        failures: 0,
    };
    for _ in 0..trials {
        let n = rng.random_range(1..=max_dim.max(1));
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..2.0)).collect();
        let ratio = budget_ratio.unwrap_or_else(|| rng.random_range(0.01..=1.0));
        let k = ratio * n as f64;
        let s = project(&z, k)?;
        let reference = reference_projection(&z, k);
        let dev = s
            .values()
            .iter()
            .zip(&reference)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let again = project(s.values(), k)?;
        out.idempotent &= again.values() == s.values();
        out.max_deviation = out.max_deviation.max(dev);
        out.max_kkt_residual = out.max_kkt_residual.max(kkt_residual(&z, s.values(), k));
        out.max_budget_excess = out.max_budget_excess.max(s.sum() - k);
        if dev > DEVIATION_TOL || s.sum() > k + 1e-9 {
            out.failures += 1;
        }
    }
    Ok(out)
}
