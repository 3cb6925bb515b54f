//! Structure parameters `s ∈ [0,1]^|C|`: Bernoulli mask sampling, the score
//! function, the diagonal preconditioner and Euclidean projection onto the
//! budgeted box `{s ∈ [lo,hi]^n : Σ s ≤ K}`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Mask;

/// Default interior margin keeping `s(1−s)` away from zero.
pub const DEFAULT_EPS: f64 = 1e-4;

/// Stopping tolerance on the budget residual during projection.
pub const PROJECTION_TOL: f64 = 1e-10;
const PROJECTION_MAX_ITERS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureVector {
    s: Vec<f64>,
    budget: f64,
    remain_ratio: f64,
    /// Lower/upper margin the score function accepts: `[eps, 1 − eps]`.
    eps: f64,
}

impl StructureVector {
    /// `s = ρ·1` clamped into `[eps, 1 − eps]`, with `K = ρ·n`.
    pub fn init(n: usize, remain_ratio: f64, eps: f64) -> Result<Self> {
        check_ratio(remain_ratio)?;
        check_eps(eps)?;
        let v = remain_ratio.clamp(eps, 1.0 - eps);
        Ok(StructureVector {
            s: vec![v; n],
            budget: remain_ratio * n as f64,
            remain_ratio,
            eps,
        })
    }

    /// Wraps explicit values. Entries must lie in `[0, 1]`.
    pub fn from_values(s: Vec<f64>, remain_ratio: f64) -> Result<Self> {
        check_ratio(remain_ratio)?;
        if let Some(bad) = s.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::param("s", format!("entry {bad} outside [0, 1]")));
        }
        Ok(StructureVector {
            budget: remain_ratio * s.len() as f64,
            s,
            remain_ratio,
            eps: DEFAULT_EPS,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.s
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn remain_ratio(&self) -> f64 {
        self.remain_ratio
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn sum(&self) -> f64 {
        self.s.iter().sum()
    }

    /// Checks every entry lies in `[eps, 1 − eps]`.
    pub fn check_interior(&self) -> Result<()> {
        let (lo, hi) = (self.eps, 1.0 - self.eps);
        match self.s.iter().position(|&v| !(lo..=hi).contains(&v)) {
            Some(j) => Err(Error::Contract(format!(
                "s[{j}] = {} outside [{lo}, {hi}]",
                self.s[j]
            ))),
            None => Ok(()),
        }
    }

    /// Maps every entry into `[eps, 1 − eps]`.
    pub fn clamp_interior(&self, eps: f64) -> Result<Self> {
        check_eps(eps)?;
        Ok(StructureVector {
            s: self.s.iter().map(|v| v.clamp(eps, 1.0 - eps)).collect(),
            eps,
            ..self.clone()
        })
    }
}

fn check_ratio(rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::param("remain_ratio", format!("{rho} not in (0, 1]")));
    }
    Ok(())
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps < 0.1) {
        return Err(Error::param("eps", format!("{eps} not in (0, 0.1)")));
    }
    Ok(())
}

/// Deterministic mask sampler. The same seed and call sequence always yields
/// the same masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeededSampler {
    seed: u64,
    rng: ChaCha8Rng,
}

/// SplitMix64 finalizer; used to derive child seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeededSampler {
    pub fn new(seed: u64) -> Self {
        SeededSampler {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream `index`, seeded with `mix_seed(seed, index)`.
    pub fn split(&self, index: u64) -> SeededSampler {
        SeededSampler::new(mix_seed(self.seed, index))
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// One independent Bernoulli draw per channel: `m_j = 1` w.p. `s_j`.
    pub fn sample_mask(&mut self, s: &StructureVector) -> Mask {
        Mask::new(s.s.iter().map(|&p| self.rng.random::<f64>() < p).collect())
    }
}

/// `∇_s ln p(m|s) = (m − s) / (s(1 − s))`, elementwise.
pub fn score(m: &Mask, s: &StructureVector) -> Result<Vec<f64>> {
    if m.len() != s.len() {
        return Err(Error::Dimension {
            op: "score",
            lhs: vec![m.len()],
            rhs: vec![s.len()],
        });
    }
    s.check_interior()?;
    Ok(m
        .bits()
        .iter()
        .zip(&s.s)
        .map(|(&b, &p)| {
            let mv = if b { 1.0 } else { 0.0 };
            (mv - p) / (p * (1.0 - p))
        })
        .collect())
}

/// Diagonal of `H^α(s) = diag(s∘(1−s))^α`.
///
/// The variance bound holds for `α ∈ [0.5, 1)`; other values are computed but
/// logged.
pub fn preconditioner(s: &StructureVector, alpha: f64) -> Vec<f64> {
    if !(0.5..1.0).contains(&alpha) {
        log::warn!("preconditioner exponent {alpha} outside [0.5, 1): variance bound not guaranteed");
    }
    s.s.iter().map(|&p| (p * (1.0 - p)).powf(alpha)).collect()
}

/// Euclidean projection onto `{s ∈ [0,1]^n : Σ s ≤ K}`.
pub fn project(z: &[f64], budget: f64) -> Result<StructureVector> {
    let n = z.len();
    if !(budget > 0.0 && budget <= n as f64) {
        return Err(Error::param("budget", format!("{budget} not in (0, {n}]")));
    }
    let s = project_box(z, budget, 0.0, 1.0);
    Ok(StructureVector {
        s,
        budget,
        remain_ratio: budget / n as f64,
        eps: DEFAULT_EPS,
    })
}

/// Projection onto `{s ∈ [eps, 1−eps]^n : Σ s ≤ K}`. Unlike clamping after
/// [`project`], the result respects the budget and the score-function
/// margin at the same time.
pub fn project_interior(z: &[f64], budget: f64, eps: f64) -> Result<StructureVector> {
    check_eps(eps)?;
    let n = z.len();
    if !(budget >= eps * n as f64 && budget <= n as f64) {
        return Err(Error::param(
            "budget",
            format!("{budget} not in [{}, {n}]", eps * n as f64),
        ));
    }
    Ok(StructureVector {
        s: project_box(z, budget, eps, 1.0 - eps),
        budget,
        remain_ratio: budget / n as f64,
        eps,
    })
}

/// `s = clip(z − v·1, lo, hi)` with `v = max(0, v₁)` and `v₁` the root of
/// `g(v) = Σ clip(z − v, lo, hi) − K`, found by bisection.
///
/// The accepted shift always has `g(v) ≤ 0` in floating point, so the output
/// is feasible as summed and projecting it again returns it unchanged.
pub fn project_box(z: &[f64], budget: f64, lo: f64, hi: f64) -> Vec<f64> {
    let clip = |v: f64| -> Vec<f64> { z.iter().map(|&x| (x - v).clamp(lo, hi)).collect() };
    let excess = |s: &[f64]| s.iter().sum::<f64>() - budget;

    let at_zero = clip(0.0);
    if excess(&at_zero) <= 0.0 {
        return at_zero;
    }
    let min = z.iter().copied().fold(f64::INFINITY, f64::min);
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // g(0) > 0 so the root is positive; g(max − lo) = n·lo − K ≤ 0.
    let mut low = 0.0_f64.max(min - hi);
    let mut high = max - lo;
    let mut best = clip(high);
    for _ in 0..PROJECTION_MAX_ITERS {
        let mid = 0.5 * (low + high);
        if mid <= low || mid >= high {
            break;
        }
        let s = clip(mid);
        let g = excess(&s);
        if g > 0.0 {
            low = mid;
        } else {
            high = mid;
            best = s;
            if g >= -PROJECTION_TOL {
                break;
            }
        }
    }
    best
}
