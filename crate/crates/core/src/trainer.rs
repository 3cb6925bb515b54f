//! The training loop: per-iteration mask sampling, a structure update from
//! two sparse forward passes, a weight update from one sparse backward pass,
//! plus final mask selection and checkpointing.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost::{analytic_flops, savings};
use crate::data::DatasetHandle;
use crate::error::{Error, Result};
use crate::estimators::vr_pge;
use crate::meter;
use crate::network::{Batch, ForwardCache, Mask, NetworkParams, NetworkSpec};
use crate::structure::{project_interior, SeededSampler, StructureVector, DEFAULT_EPS};

const CHECKPOINT_MAGIC: &str = "cst-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;
const EVAL_CHUNK: usize = 512;

/// Sampler streams split off `config.seed`.
const STREAM_INIT: u64 = 0;
const STREAM_MASKS: u64 = 1;
const STREAM_EVAL: u64 = 2;
const STREAM_FINALIZE: u64 = 3;

/// Slack allowed on `Σ s ≤ K` after every structure update.
pub const BUDGET_SLACK: f64 = 1e-9;

fn default_alpha() -> f64 {
    0.5
}
fn default_weight_lr() -> f64 {
    0.1
}
fn default_structure_lr() -> f64 {
    12e-3
}
fn default_one() -> usize {
    1
}
fn default_eps() -> f64 {
    DEFAULT_EPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Target fraction of channels kept; the budget is `K = ρ·|C|`.
    pub remain_ratio: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_weight_lr")]
    pub weight_lr: f64,
    #[serde(default = "default_structure_lr")]
    pub structure_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Iterations between fresh draws of the weight-path mask.
    #[serde(default = "default_one")]
    pub resample_interval: usize,
    /// Masks drawn when selecting the final subnetwork.
    #[serde(default = "default_one")]
    pub eval_samples: usize,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Iterations between metrics records. Epoch ends are always recorded.
    #[serde(default = "default_one")]
    pub log_interval: usize,
    #[serde(default)]
    pub dataset: String,
    #[serde(default)]
    pub model: String,
}

impl TrainConfig {
    pub fn new(remain_ratio: f64, epochs: usize, batch_size: usize, seed: u64) -> Result<Self> {
        let c = TrainConfig {
            remain_ratio,
            alpha: default_alpha(),
            weight_lr: default_weight_lr(),
            structure_lr: default_structure_lr(),
            epochs,
            batch_size,
            seed,
            resample_interval: 1,
            eval_samples: 1,
            eps: DEFAULT_EPS,
            log_interval: 1,
            dataset: String::new(),
            model: String::new(),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, name: &'static str, reason: String| if ok { Ok(()) } else { Err(Error::param(name, reason)) };
        check(
            self.remain_ratio > 0.0 && self.remain_ratio <= 1.0,
            "remain_ratio",
            format!("{} not in (0, 1]", self.remain_ratio),
        )?;
        check(self.alpha.is_finite(), "alpha", format!("{} is not finite", self.alpha))?;
        check(self.weight_lr > 0.0 && self.weight_lr.is_finite(), "weight_lr", format!("{} must be positive", self.weight_lr))?;
        check(
            self.structure_lr >= 0.0 && self.structure_lr.is_finite(),
            "structure_lr",
            format!("{} must be non-negative", self.structure_lr),
        )?;
        check(self.batch_size >= 1, "batch_size", "must be at least 1".into())?;
        check(self.resample_interval >= 1, "resample_interval", "must be at least 1".into())?;
        check(self.eval_samples >= 1, "eval_samples", "must be at least 1".into())?;
        check(self.log_interval >= 1, "log_interval", "must be at least 1".into())?;
        check(
            self.eps > 0.0 && self.eps < 0.5,
            "eps",
            format!("{} not in (0, 0.5)", self.eps),
        )?;
        check(
            self.remain_ratio >= self.eps,
            "remain_ratio",
            format!("{} below the interior margin eps = {}", self.remain_ratio, self.eps),
        )
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: u64,
    /// Global iteration count after this step, starting at 1.
    pub iteration: u64,
    /// Minibatch loss under the weight-path mask.
    pub train_loss: f64,
    /// Held-out accuracy under a mask drawn from `s`; only on epoch-end
    /// records.
    pub eval_accuracy: Option<f64>,
    pub s_sum: f64,
    pub budget: f64,
    /// Active channels in the weight-path mask.
    pub active_channels: usize,
    /// Analytic forward FLOPs per sample under the weight-path mask.
    pub sparse_flops: f64,
    pub dense_flops: f64,
    /// Multiply-accumulates executed by this iteration's two forward passes
    /// and one backward pass.
    pub iteration_macs: u64,
    /// Dense training FLOPs over this method's FLOPs, both summed over all
    /// iterations so far. Dense: forward plus twice-forward backward. Ours:
    /// two sparse forwards plus a sparse backward at twice the cost of the
    /// first.
    pub cumulative_savings: f64,
}

/// State captured when training aborts on a non-finite value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailureSnapshot {
    pub epoch: u64,
    pub iteration: u64,
    pub batch_index: usize,
    /// Losses under the weight-path mask and the second mask.
    pub losses: (f64, f64),
    pub masks: (Mask, Mask),
    pub s: StructureVector,
    pub params: NetworkParams,
}

/// One candidate mask in the final selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRow {
    pub active_channels: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub candidates: Vec<CandidateRow>,
    /// Index into `candidates` of the selected (lowest training loss) mask.
    pub best: usize,
    pub mask: Mask,
    pub eval_accuracy: f64,
    pub train_accuracy: f64,
    pub active_channels: usize,
    pub total_channels: usize,
    pub params_pct: f64,
    pub flops_pct: f64,
    pub savings: f64,
    /// Every candidate mask was identical.
    pub deterministic: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Checkpoint {
    magic: String,
    version: u32,
    spec: NetworkSpec,
    config: TrainConfig,
    params: NetworkParams,
    s: StructureVector,
    mask_sampler: SeededSampler,
    eval_sampler: SeededSampler,
    held_mask: Option<Mask>,
    epoch: u64,
    iteration: u64,
    dense_cost: f64,
    sparse_cost: f64,
}

/// Runs the two forward passes of an iteration, caching the first. Returns
/// both losses, the cache and the multiply-accumulates spent.
fn sparse_passes(
    spec: &NetworkSpec,
    params: &NetworkParams,
    batch: &Batch,
    m1: &Mask,
    m2: &Mask,
) -> Result<(f64, f64, ForwardCache, u64)> {
    let (res, count) = meter::measure(|| -> Result<_> {
        let (l1, cache) = spec.forward(params, m1, batch)?;
        let l2 = spec.loss(params, m2, batch)?;
        Ok((l1, l2, cache))
    });
    let (l1, l2, cache) = res?;
    Ok((l1, l2, cache, count.macs))
}

/// Multiply-accumulates of one training iteration's compute (forward under
/// `m1`, forward under `m2`, backward under `m1`), without updating anything.
pub fn iteration_macs(spec: &NetworkSpec, params: &NetworkParams, batch: &Batch, m1: &Mask, m2: &Mask) -> Result<u64> {
    let (_, _, cache, fwd) = sparse_passes(spec, params, batch, m1, m2)?;
    let (grad, bwd) = meter::measure(|| spec.backward_weights(params, &cache));
    grad?;
    Ok(fwd + bwd.macs)
}

#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    spec: NetworkSpec,
    params: NetworkParams,
    s: StructureVector,
    mask_sampler: SeededSampler,
    eval_sampler: SeededSampler,
    held_mask: Option<Mask>,
    epoch: u64,
    iteration: u64,
    dense_cost: f64,
    sparse_cost: f64,
    failure: Option<Box<FailureSnapshot>>,
}

impl Trainer {
    pub fn new(config: TrainConfig, spec: NetworkSpec) -> Result<Self> {
        config.validate()?;
        let root = SeededSampler::new(config.seed);
        let params = spec.init_params(root.split(STREAM_INIT).rng());
        let s = StructureVector::init(spec.num_channels(), config.remain_ratio, config.eps)?;
        Ok(Trainer {
            mask_sampler: root.split(STREAM_MASKS),
            eval_sampler: root.split(STREAM_EVAL),
            config,
            spec,
            params,
            s,
            held_mask: None,
            epoch: 0,
            iteration: 0,
            dense_cost: 0.0,
            sparse_cost: 0.0,
            failure: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn structure(&self) -> &StructureVector {
        &self.s
    }

    /// Epochs completed.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Snapshot of the iteration that produced the last non-finite error.
    pub fn failure(&self) -> Option<&FailureSnapshot> {
        self.failure.as_deref()
    }

    pub fn into_parts(self) -> (NetworkParams, StructureVector) {
        (self.params, self.s)
    }

    fn check_data(&self, data: &DatasetHandle) -> Result<()> {
        if data.example_shape() != self.spec.input_shape() {
            return Err(Error::Input(format!(
                "dataset examples have shape {:?}, network expects {:?}",
                data.example_shape(),
                self.spec.input_shape()
            )));
        }
        if data.classes() > self.spec.classes() {
            return Err(Error::Input(format!(
                "dataset has {} classes, network outputs {}",
                data.classes(),
                self.spec.classes()
            )));
        }
        Ok(())
    }

    /// One iteration on `batch`. Returns the metrics record for it (with no
    /// eval accuracy).
    pub fn step(&mut self, batch: &Batch, batch_index: usize) -> Result<MetricsRecord> {
        let interval = self.config.resample_interval as u64;
        let m1 = match &self.held_mask {
            Some(m) if self.iteration % interval != 0 => m.clone(),
            _ => {
                let m = self.mask_sampler.sample_mask(&self.s);
                self.held_mask = Some(m.clone());
                m
            }
        };
        let m2 = self.mask_sampler.sample_mask(&self.s);

        let (l1, l2, cache, fwd_macs) = sparse_passes(&self.spec, &self.params, batch, &m1, &m2)?;
        if !(l1.is_finite() && l2.is_finite()) {
            self.failure = Some(Box::new(FailureSnapshot {
                epoch: self.epoch,
                iteration: self.iteration,
                batch_index,
                losses: (l1, l2),
                masks: (m1, m2),
                s: self.s.clone(),
                params: self.params.clone(),
            }));
            return Err(Error::NonFinite(format!(
                "loss ({l1}, {l2}) at epoch {} iteration {} batch {batch_index}",
                self.epoch, self.iteration
            )));
        }

        // Structure update first, then weights under the pre-update mask.
        let g = vr_pge(l1, l2, &m1, &self.s, self.config.alpha)?;
        let z: Vec<f64> = self
            .s
            .values()
            .iter()
            .zip(&g.g)
            .map(|(s, g)| s - self.config.structure_lr * g)
            .collect();
        self.s = project_interior(&z, self.s.budget(), self.config.eps)?;
        if self.s.sum() > self.s.budget() + BUDGET_SLACK {
            return Err(Error::Contract(format!("Σs = {} exceeds budget {}", self.s.sum(), self.s.budget())));
        }

        let (grad, bwd) = meter::measure(|| self.spec.backward_weights(&self.params, &cache));
        self.params.sgd_step(&grad?, self.config.weight_lr);
        if !self.params.is_finite() {
            return Err(Error::NonFinite(format!("weights after iteration {}", self.iteration)));
        }

        let (f1, fd) = analytic_flops(&self.spec, &m1)?;
        let (f2, _) = analytic_flops(&self.spec, &m2)?;
        let rows = batch.labels.len() as f64;
        self.dense_cost += 3.0 * fd * rows;
        self.sparse_cost += (3.0 * f1 + f2) * rows;
        self.iteration += 1;
        Ok(MetricsRecord {
            epoch: self.epoch,
            iteration: self.iteration,
            train_loss: l1,
            eval_accuracy: None,
            s_sum: self.s.sum(),
            budget: self.s.budget(),
            active_channels: m1.count_ones(),
            sparse_flops: f1,
            dense_flops: fd,
            iteration_macs: fwd_macs + bwd.macs,
            cumulative_savings: self.dense_cost / self.sparse_cost,
        })
    }

    /// Runs one epoch, passing every emitted record to `sink`.
    pub fn run_epoch(&mut self, data: &DatasetHandle, sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>) -> Result<()> {
        self.check_data(data)?;
        let batches: Vec<Batch> = data.epoch_batches(self.config.batch_size, self.config.seed, self.epoch).collect();
        let last = batches.len() - 1;
        for (i, batch) in batches.iter().enumerate() {
            let mut rec = self.step(batch, i)?;
            if i == last {
                rec.eval_accuracy = Some(self.epoch_eval(data)?);
            }
            if i == last || rec.iteration % self.config.log_interval as u64 == 0 {
                sink(&rec)?;
            }
        }
        self.epoch += 1;
        Ok(())
    }

    /// Trains until `config.epochs` epochs are complete.
    pub fn run(&mut self, data: &DatasetHandle, sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>) -> Result<()> {
        while self.epoch < self.config.epochs as u64 {
            self.run_epoch(data, sink)?;
        }
        Ok(())
    }

    fn eval_rows(data: &DatasetHandle) -> &[usize] {
        if data.eval_indices().is_empty() {
            data.train_indices()
        } else {
            data.eval_indices()
        }
    }

    fn epoch_eval(&mut self, data: &DatasetHandle) -> Result<f64> {
        let mask = self.eval_sampler.sample_mask(&self.s);
        let ev = self
            .spec
            .evaluate(&self.params, &mask, data.features(), data.labels(), Self::eval_rows(data), EVAL_CHUNK)?;
        Ok(ev.accuracy)
    }

    /// Draws `eval_samples` masks from `p(·|s)`, keeps the one with the
    /// lowest training loss and reports it. Uses its own seeded stream, so
    /// repeated calls on the same state agree.
    pub fn finalize(&self, data: &DatasetHandle) -> Result<FinalReport> {
        self.check_data(data)?;
        let mut sampler = SeededSampler::new(self.config.seed).split(STREAM_FINALIZE);
        let mut candidates = Vec::with_capacity(self.config.eval_samples);
        let mut masks = Vec::with_capacity(self.config.eval_samples);
        for _ in 0..self.config.eval_samples {
            let mask = sampler.sample_mask(&self.s);
            let tr = self
                .spec
                .evaluate(&self.params, &mask, data.features(), data.labels(), data.train_indices(), EVAL_CHUNK)?;
            let ev = self
                .spec
                .evaluate(&self.params, &mask, data.features(), data.labels(), Self::eval_rows(data), EVAL_CHUNK)?;
            candidates.push(CandidateRow {
                active_channels: mask.count_ones(),
                train_loss: tr.loss,
                train_accuracy: tr.accuracy,
                eval_accuracy: ev.accuracy,
            });
            masks.push(mask);
        }
        let best = candidates
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.train_loss.total_cmp(&b.1.train_loss))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let mask = masks[best].clone();
        let (ps, pd) = self.spec.param_counts(&mask)?;
        let (fs, fd) = analytic_flops(&self.spec, &mask)?;
        Ok(FinalReport {
            best,
            eval_accuracy: candidates[best].eval_accuracy,
            train_accuracy: candidates[best].train_accuracy,
            active_channels: mask.count_ones(),
            total_channels: mask.len(),
            params_pct: 100.0 * ps as f64 / pd as f64,
            flops_pct: 100.0 * fs / fd,
            savings: savings(fs, fd).ours,
            deterministic: masks.iter().all(|m| *m == mask),
            mask,
            candidates,
        })
    }

    /// Writes the full training state as JSON. Floats round-trip exactly.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let ck = Checkpoint {
            magic: CHECKPOINT_MAGIC.into(),
            version: CHECKPOINT_VERSION,
            spec: self.spec.clone(),
            config: self.config.clone(),
            params: self.params.clone(),
            s: self.s.clone(),
            mask_sampler: self.mask_sampler.clone(),
            eval_sampler: self.eval_sampler.clone(),
            held_mask: self.held_mask.clone(),
            epoch: self.epoch,
            iteration: self.iteration,
            dense_cost: self.dense_cost,
            sparse_cost: self.sparse_cost,
        };
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec(&ck)?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        let ck: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| Error::load(path, format!("corrupt checkpoint: {e}")))?;
        if ck.magic != CHECKPOINT_MAGIC {
            return Err(Error::load(path, format!("not a checkpoint (magic {:?})", ck.magic)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::load(
                path,
                format!("checkpoint version {} unsupported, expected {CHECKPOINT_VERSION}", ck.version),
            ));
        }
        ck.config.validate()?;
        let expected = ck.spec.init_params(SeededSampler::new(0).rng());
        let shapes = |p: &NetworkParams| -> Vec<Vec<usize>> { p.layers.iter().map(|l| l.weight.shape().to_vec()).collect() };
        if shapes(&expected) != shapes(&ck.params) || ck.s.len() != ck.spec.num_channels() {
            return Err(Error::load(path, "parameters do not match the stored network"));
        }
        if ck.held_mask.as_ref().is_some_and(|m| m.len() != ck.s.len()) {
            return Err(Error::load(path, "held mask length does not match the stored network"));
        }
        Ok(Trainer {
            config: ck.config,
            spec: ck.spec,
            params: NetworkParams::from_layers(ck.params.layers),
            s: ck.s,
            mask_sampler: ck.mask_sampler,
            eval_sampler: ck.eval_sampler,
            held_mask: ck.held_mask,
            epoch: ck.epoch,
            iteration: ck.iteration,
            dense_cost: ck.dense_cost,
            sparse_cost: ck.sparse_cost,
            failure: None,
        })
    }

    /// Overrides the epoch target, e.g. to continue a restored run.
    pub fn set_epochs(&mut self, epochs: usize) {
        self.config.epochs = epochs;
    }

    /// Changes how many candidate masks [`Trainer::finalize`] draws.
    pub fn with_eval_samples(mut self, n: usize) -> Self {
        self.config.eval_samples = n.max(1);
        self
    }
}

/// Trains from scratch and returns the final weights, structure and metrics.
pub fn train(config: TrainConfig, spec: NetworkSpec, data: &DatasetHandle) -> Result<(NetworkParams, StructureVector, Vec<MetricsRecord>)> {
    let mut trainer = Trainer::new(config, spec)?;
    let mut records = Vec::new();
    trainer.run(data, &mut |r| {
        records.push(r.clone());
        Ok(())
    })?;
    let (params, s) = trainer.into_parts();
    Ok((params, s, records))
}
