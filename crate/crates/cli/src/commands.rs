use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use cst_core::diagnostics::{self, DiagnosticMode, DiagnosticReport};
use cst_core::trainer::{FinalReport, Trainer};
use cst_core::{NetworkSpec, SeededSampler, StructureVector};

use crate::config::{self, LoadedConfig, RunConfig};
use crate::kkt::{self, DEVIATION_TOL};
use crate::{output_dir, CliError, ConfigArgs};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const REPORT_FILE: &str = "report.json";
pub const FAILURE_FILE: &str = "failure.json";
pub const DIAGNOSE_FILE: &str = "diagnose.json";
pub const EVAL_FILE: &str = "eval.json";

/// Diagnostics draw from their own stream split off the training seed.
const STREAM_DIAGNOSE: u64 = 4;

#[derive(Serialize)]
struct DatasetInfo<'a> {
    provenance: &'a str,
    train_rows: usize,
    eval_rows: usize,
}

#[derive(Serialize)]
struct Artifacts {
    metrics: PathBuf,
    checkpoint: PathBuf,
    report: PathBuf,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    version: &'static str,
    created_unix: u64,
    config_path: &'a Path,
    overrides: &'a [String],
    seed_flag: Option<u64>,
    resumed_from: Option<&'a Path>,
    config: &'a RunConfig,
    spec: &'a NetworkSpec,
    dataset: DatasetInfo<'a>,
    artifacts: Artifacts,
}

#[derive(Serialize)]
struct TrainReport<'a> {
    epochs: u64,
    iterations: u64,
    s_sum: f64,
    budget: f64,
    #[serde(flatten)]
    report: &'a FinalReport,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(cst_core::Error::from)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::io(path, e)
}

fn print_table(out: &mut dyn Write, r: &FinalReport) -> std::io::Result<()> {
    writeln!(out, "{:>10}  {:>9}  {:>8}  {:>21}", "Val Acc(%)", "Params(%)", "FLOPs(%)", "Train-Cost Savings(×)")?;
    writeln!(
        out,
        "{:>10.2}  {:>9.2}  {:>8.2}  {:>21.2}",
        100.0 * r.eval_accuracy,
        r.params_pct,
        r.flops_pct,
        r.savings
    )?;
    writeln!(out, "channels kept: {} of {}", r.active_channels, r.total_channels)?;
    if r.deterministic && r.candidates.len() > 1 {
        writeln!(out, "note: all {} sampled masks were identical", r.candidates.len())?;
    }
    Ok(())
}

fn print_candidates(out: &mut dyn Write, r: &FinalReport) -> std::io::Result<()> {
    writeln!(out, "{:>4}  {:>8}  {:>10}  {:>12}  {:>10}", "mask", "channels", "train_loss", "train_acc(%)", "val_acc(%)")?;
    for (i, c) in r.candidates.iter().enumerate() {
        writeln!(
            out,
            "{:>4}  {:>8}  {:>10.6}  {:>12.2}  {:>10.2}{}",
            i,
            c.active_channels,
            c.train_loss,
            100.0 * c.train_accuracy,
            100.0 * c.eval_accuracy,
            if i == r.best { "  *" } else { "" }
        )?;
    }
    Ok(())
}

fn check_spec(trainer: &Trainer, spec: &NetworkSpec, checkpoint: &Path) -> Result<(), CliError> {
    if trainer.spec() != spec {
        return Err(CliError::Mismatch(format!(
            "checkpoint {} was trained on a different network than the config describes",
            checkpoint.display()
        )));
    }
    Ok(())
}

pub fn train(args: &ConfigArgs, resume: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let mut loaded = config::load(&args.config, args.seed, &args.overrides)?;
    let data = loaded.dataset()?;
    let spec = loaded.network(&data)?;
    if loaded.config.train.dataset.is_empty() {
        loaded.config.train.dataset = data.provenance().to_owned();
    }
    if loaded.config.train.model.is_empty() {
        loaded.config.train.model = loaded.run_name();
    }
    let dir = output_dir(args.out.as_deref(), &loaded.run_name());
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let metrics_path = dir.join(METRICS_FILE);
    let checkpoint_path = dir.join(CHECKPOINT_FILE);
    let report_path = dir.join(REPORT_FILE);

    let mut trainer = match resume {
        Some(p) => {
            let mut t = Trainer::load(p)?;
            check_spec(&t, &spec, p)?;
            t.set_epochs(loaded.config.train.epochs);
            t
        }
        None => Trainer::new(loaded.config.train.clone(), spec.clone())?,
    };

    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION"),
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        config_path: &loaded.source,
        overrides: &args.overrides,
        seed_flag: args.seed,
        resumed_from: resume,
        config: &loaded.config,
        spec: &spec,
        dataset: DatasetInfo {
            provenance: data.provenance(),
            train_rows: data.train_indices().len(),
            eval_rows: data.eval_indices().len(),
        },
        artifacts: Artifacts {
            metrics: metrics_path.clone(),
            checkpoint: checkpoint_path.clone(),
            report: report_path.clone(),
        },
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;

    let file = if resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&metrics_path)
    } else {
        File::create(&metrics_path)
    }
    .map_err(io_err(&metrics_path))?;
    let mut metrics = BufWriter::new(file);
    let every = loaded.config.output.checkpoint_every as u64;
    let target = loaded.config.train.epochs as u64;
    while trainer.epoch() < target {
        let mut sink = |r: &cst_core::trainer::MetricsRecord| -> cst_core::Result<()> {
            serde_json::to_writer(&mut metrics, r)?;
            metrics.write_all(b"\n")?;
            Ok(())
        };
        if let Err(e) = trainer.run_epoch(&data, &mut sink) {
            metrics.flush().map_err(io_err(&metrics_path))?;
            if let Some(snap) = trainer.failure() {
                write_json(&dir.join(FAILURE_FILE), snap)?;
            }
            return Err(e.into());
        }
        let done = trainer.epoch();
        log::info!("epoch {done}/{target} done");
        if done % every == 0 || done == target {
            metrics.flush().map_err(io_err(&metrics_path))?;
            trainer.save(&checkpoint_path)?;
        }
    }
    metrics.flush().map_err(io_err(&metrics_path))?;
    if target == 0 {
        trainer.save(&checkpoint_path)?;
    }

    let report = trainer.finalize(&data)?;
    write_json(
        &report_path,
        &TrainReport {
            epochs: trainer.epoch(),
            iterations: trainer.iteration(),
            s_sum: trainer.structure().sum(),
            budget: trainer.structure().budget(),
            report: &report,
        },
    )?;
    let io = |e| CliError::io(Path::new("<stdout>"), e);
    writeln!(out, "run: {}", loaded.run_name()).map_err(io)?;
    writeln!(out, "data: {}", data.provenance()).map_err(io)?;
    writeln!(out, "epochs: {}  iterations: {}", trainer.epoch(), trainer.iteration()).map_err(io)?;
    print_table(out, &report).map_err(io)?;
    writeln!(out, "artifacts: {}", dir.display()).map_err(io)?;
    Ok(())
}

pub fn eval(args: &ConfigArgs, checkpoint: &Path, eval_samples: Option<usize>, out: &mut dyn Write) -> Result<(), CliError> {
    let loaded = config::load(&args.config, args.seed, &args.overrides)?;
    let data = loaded.dataset()?;
    let spec = loaded.network(&data)?;
    let mut trainer = Trainer::load(checkpoint)?;
    check_spec(&trainer, &spec, checkpoint)?;
    if let Some(n) = eval_samples {
        if n == 0 {
            return Err(CliError::Config("--eval-samples must be at least 1".into()));
        }
        trainer = trainer.with_eval_samples(n);
    }
    let report = trainer.finalize(&data)?;
    let io = |e| CliError::io(Path::new("<stdout>"), e);
    print_candidates(out, &report).map_err(io)?;
    print_table(out, &report).map_err(io)?;
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_json(&dir.join(EVAL_FILE), &report)?;
    }
    Ok(())
}

fn print_diagnostics(out: &mut dyn Write, r: &DiagnosticReport) -> std::io::Result<()> {
    match r.mode {
        DiagnosticMode::Exact => writeln!(out, "channels: {} (exact enumeration)", r.channels)?,
        DiagnosticMode::MonteCarlo => {
            writeln!(out, "channels: {} (Monte-Carlo)", r.channels)?;
            if let Some(b) = &r.banner {
                writeln!(out, "*** {b} ***")?;
            }
        }
    }
    writeln!(out, "alpha: {}", r.alpha)?;
    if let (Some(vr), Some(pg)) = (r.residual_vr, r.residual_pge) {
        writeln!(out, "unbiasedness residual VR-PGE: {vr:.3e}")?;
        writeln!(out, "unbiasedness residual PGE:    {pg:.3e}")?;
    }
    let (pge, vr) = match &r.exact {
        Some(ex) => (ex.var_pge_total, ex.var_vr_total),
        None => (r.sampled.var_pge_total, r.sampled.var_vr_total),
    };
    writeln!(out, "total variance PGE:    {pge:.6e}")?;
    writeln!(out, "total variance VR-PGE: {vr:.6e}")?;
    writeln!(out, "variance ratio PGE/VR-PGE: {:.4}", r.variance_ratio)?;
    writeln!(out, "variance bound slack: {:.6e}", r.bound_slack)?;
    writeln!(out, "V_hat:    {:.6e}", r.v_hat)?;
    writeln!(out, "Vmax_hat: {:.6e}", r.vmax_hat)?;
    writeln!(out, "EL2_hat:  {:.6e}", r.el2_hat)?;
    writeln!(out, "Vmax_hat/V_hat: {:.4}", r.vmax_hat / r.v_hat)?;
    Ok(())
}

pub fn diagnose(args: &ConfigArgs, checkpoint: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let loaded: LoadedConfig = config::load(&args.config, args.seed, &args.overrides)?;
    let data = loaded.dataset()?;
    let spec = loaded.network(&data)?;
    let trainer = match checkpoint {
        Some(p) => {
            let t = Trainer::load(p)?;
            check_spec(&t, &spec, p)?;
            t
        }
        None => Trainer::new(loaded.config.train.clone(), spec.clone())?,
    };
    let d = &loaded.config.diagnose;
    let s = match &d.s {
        Some(values) => {
            if values.len() != spec.num_channels() {
                return Err(CliError::Config(format!(
                    "diagnose.s has {} entries, the network has {} channels",
                    values.len(),
                    spec.num_channels()
                )));
            }
            StructureVector::from_values(values.clone(), loaded.config.train.remain_ratio)?
        }
        None => trainer.structure().clone(),
    };
    s.check_interior()?;
    let rows: Vec<usize> = data.train_indices().iter().copied().take(d.batch_rows.max(1)).collect();
    let batch = data.batch(&rows);
    let mut sampler = SeededSampler::new(trainer.config().seed).split(STREAM_DIAGNOSE);
    let model = diagnostics::network_model(trainer.spec(), trainer.params(), &batch);
    let report = diagnostics::diagnose(model, &s, d.alpha, d.n_samples, &mut sampler)?;
    print_diagnostics(out, &report).map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
    let dir = output_dir(args.out.as_deref(), &loaded.run_name());
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    write_json(&dir.join(DIAGNOSE_FILE), &report)?;
    Ok(())
}

pub fn project_check(trials: usize, dim: usize, seed: u64, budget_ratio: Option<f64>, out: &mut dyn Write) -> Result<(), CliError> {
    if trials == 0 || dim == 0 {
        return Err(CliError::Config("--trials and --dim must be at least 1".into()));
    }
    if let Some(r) = budget_ratio {
        if !(r > 0.0 && r <= 1.0) {
            return Err(CliError::Config(format!("--budget-ratio {r} not in (0, 1]")));
        }
    }
    let c = kkt::run_check(trials, dim, seed, budget_ratio)?;
    let io = |e| CliError::io(Path::new("<stdout>"), e);
    writeln!(out, "trials: {}  max dim: {}  seed: {}", c.trials, c.dim, c.seed).map_err(io)?;
    writeln!(out, "max deviation from reference: {:.3e}", c.max_deviation).map_err(io)?;
    writeln!(out, "max KKT residual: {:.3e}", c.max_kkt_residual).map_err(io)?;
    writeln!(out, "max budget excess: {:.3e}", c.max_budget_excess).map_err(io)?;
    writeln!(out, "idempotent: {}", c.idempotent).map_err(io)?;
    writeln!(out, "failures (> {DEVIATION_TOL:e}): {}", c.failures).map_err(io)?;
    if c.failures > 0 || !c.idempotent {
        return Err(CliError::CheckFailed(format!("{} of {} projections failed", c.failures, c.trials)));
    }
    Ok(())
}
