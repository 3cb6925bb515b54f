//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::Value;

use cst_cli::kkt::run_check;
use cst_core::cost::savings;
use cst_core::data::synth_blobs;
use cst_core::diagnostics::network_model;
use cst_core::estimators::{bound_term, enumerate_expectation, exact_moments, EstimatorKind};
use cst_core::meter;
use cst_core::network::{Batch, Layer, LayerSpec, Mask, NetworkSpec};
use cst_core::tensor::Tensor;
use cst_core::trainer::iteration_macs;
use cst_core::{Result, StructureVector};

type Outcome = std::result::Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn cst(args: &[&str]) -> std::result::Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_cst")).args(args).output().map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!("cst {} failed: {}", args.join(" "), String::from_utf8_lossy(&o.stderr).trim()))
    }
}

fn train(config: &str, out: &Path, extra: &[&str]) -> std::result::Result<Value, String> {
    let cfg = configs().join(config);
    let mut args = vec!["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    cst(&args)?;
    read_json(&out.join("report.json"))
}

fn read_json(path: &Path) -> std::result::Result<Value, String> {
    let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_slice(&bytes).map_err(|e| e.to_string())
}

fn metrics(dir: &Path) -> Vec<Value> {
    fs::read_to_string(dir.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Random multilinear loss over `n` channels: offset plus linear and pairwise
/// terms.
struct Toy {
    offset: f64,
    linear: Vec<f64>,
    pairs: Vec<(usize, usize, f64)>,
}

impl Toy {
    fn random(n: usize, r: &mut StdRng) -> Self {
        Toy {
            offset: r.random_range(0.5..3.0),
            linear: (0..n).map(|_| r.random_range(-0.5..0.5)).collect(),
            pairs: (0..n).map(|_| (r.random_range(0..n), r.random_range(0..n), r.random_range(-0.4..0.4))).collect(),
        }
    }

    fn eval(&self, m: &Mask) -> f64 {
        let b = m.as_f64();
        self.offset
            + self.linear.iter().zip(&b).map(|(c, x)| c * x).sum::<f64>()
            + self.pairs.iter().map(|&(i, j, c)| c * b[i] * b[j]).sum::<f64>()
    }
}

fn prob(m: &Mask, s: &[f64]) -> f64 {
    (0..s.len()).map(|j| if m.get(j) { s[j] } else { 1.0 - s[j] }).product()
}

/// `∇Φ` by central differences of the enumerated expectation; exact up to
/// rounding because `Φ` is affine in each coordinate.
fn grad_phi_fd(loss: &mut dyn FnMut(&Mask) -> f64, s: &[f64]) -> Vec<f64> {
    let n = s.len();
    let table: Vec<(Mask, f64)> = (0..1u64 << n).map(|c| Mask::from_code(c, n)).map(|m| { let l = loss(&m); (m, l) }).collect();
    let phi = |s: &[f64]| table.iter().map(|(m, l)| prob(m, s) * l).sum::<f64>();
    let h = 0.01;
    (0..n)
        .map(|j| {
            let (mut up, mut down) = (s.to_vec(), s.to_vec());
            up[j] += h;
            down[j] -= h;
            (phi(&up) - phi(&down)) / (2.0 * h)
        })
        .collect()
}

fn random_s(n: usize, r: &mut StdRng) -> Vec<f64> {
    (0..n).map(|_| r.random_range(0.03..0.97)).collect()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut r = StdRng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut models = 0;
    let run = |loss: &mut dyn FnMut(&Mask) -> f64, s: &[f64], alpha: f64| -> Result<f64> {
        let oracle = grad_phi_fd(loss, s);
        let sv = StructureVector::from_values(s.to_vec(), 0.5)?;
        let vr = enumerate_expectation(|m: &Mask| Ok(loss(m)), &sv, alpha, EstimatorKind::VrPge)?;
        let pg = enumerate_expectation(|m: &Mask| Ok(loss(m)), &sv, alpha, EstimatorKind::Pge)?;
        let mut w = vr.residual().max(pg.residual());
        for j in 0..s.len() {
            let h = (s[j] * (1.0 - s[j])).powf(alpha);
            w = w.max((vr.estimate[j] - h * oracle[j]).abs()).max((pg.estimate[j] - oracle[j]).abs());
        }
        Ok(w)
    };
    for n in 3..=8 {
        let toy = Toy::random(n, &mut r);
        let s = random_s(n, &mut r);
        let alpha = r.random_range(0.5..1.0);
        worst = worst.max(run(&mut |m| toy.eval(m), &s, alpha).map_err(|e| e.to_string())?);
        models += 1;
    }
    let data = synth_blobs(3, 4, 30, 3.0, 2).map_err(|e| e.to_string())?;
    let spec = NetworkSpec::mlp(4, &[4, 3], 3).map_err(|e| e.to_string())?;
    let params = spec.init_params(&mut r);
    let batch = data.batch(data.train_indices());
    let mut net = network_model(&spec, &params, &batch);
    let s = random_s(7, &mut r);
    worst = worst.max(run(&mut |m| net(m).unwrap(), &s, 0.5).map_err(|e| e.to_string())?);
    models += 1;
    let secs = start.elapsed().as_secs_f64();
    check(worst <= 1e-9 && secs < 10.0, format!("{models} models, max residual {worst:.2e}, {secs:.2}s"))
}

fn conv3() -> NetworkSpec {
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

fn random_mask(spec: &NetworkSpec, r: &mut StdRng) -> Mask {
    let mut m = Mask::new((0..spec.num_channels()).map(|_| r.random::<bool>()).collect());
    for g in spec.channel_groups() {
        if !g.clone().any(|c| m.get(c)) {
            m.set(r.random_range(g), true);
        }
    }
    m
}

fn random_batch(spec: &NetworkSpec, rows: usize, r: &mut StdRng) -> Batch {
    let mut shape = vec![rows];
    shape.extend_from_slice(spec.input_shape());
    Batch {
        x: Tensor::from_fn(&shape, |_| r.random_range(-1.0..1.0)),
        labels: (0..rows).map(|_| r.random_range(0..spec.classes())).collect(),
    }
}

fn criterion_2() -> Outcome {
    let spec = conv3();
    let mut r = StdRng::seed_from_u64(202);
    let params = spec.init_params(&mut r);
    // Weight elements per channel pair, and forward MACs per sample per pair.
    let geometry: Vec<(usize, usize)> = spec
        .layers()
        .iter()
        .filter_map(|l| match *l {
            Layer::Conv { geom, .. } => Some((geom.kernel * geom.kernel, geom.kernel * geom.kernel * geom.out_h() * geom.out_w())),
            Layer::Dense { in_spatial, .. } | Layer::Classifier { in_spatial, .. } => Some((in_spatial, in_spatial)),
            _ => None,
        })
        .collect();
    let mut blocks = 0usize;
    for trial in 0..100 {
        let mask = random_mask(&spec, &mut r);
        let batch = random_batch(&spec, 2, &mut r);
        let rows = batch.labels.len();
        let (_, cache) = spec.forward(&params, &mask, &batch).map_err(|e| e.to_string())?;
        let (grad, count) = meter::measure(|| spec.backward_weights(&params, &cache));
        let grad = grad.map_err(|e| e.to_string())?;
        let sets = spec.active_sets(&mask).map_err(|e| e.to_string())?;
        let mut expected = 0u64;
        for (l, ((ai, ao), g)) in sets.iter().zip(&grad.layers).enumerate() {
            let (per_pair, macs) = geometry[l];
            let n_out = g.weight.shape()[0];
            let n_in = g.weight.len() / n_out / per_pair;
            for o in 0..n_out {
                for i in 0..n_in {
                    if ao.contains(o) && ai.contains(i) {
                        continue;
                    }
                    blocks += 1;
                    let block = &g.weight.data()[(o * n_in + i) * per_pair..(o * n_in + i + 1) * per_pair];
                    if block.iter().any(|v| v.to_bits() != 0) {
                        return Err(format!("trial {trial}: layer {l} block ({o},{i}) is not exactly zero"));
                    }
                }
                if !ao.contains(o) && g.bias[o].to_bits() != 0 {
                    return Err(format!("trial {trial}: layer {l} bias {o} is not exactly zero"));
                }
            }
            // Weight gradient everywhere, input gradient except at the input layer.
            let pass = (ai.len() * ao.len() * macs * rows) as u64;
            expected += if l == 0 { pass } else { 2 * pass };
        }
        if count.macs != expected {
            return Err(format!("trial {trial}: backward counted {} multiplies, active channels need {expected}", count.macs));
        }
    }
    Ok(format!("100 pairs, {blocks} pruned blocks bitwise zero, backward multiply counts exact"))
}

fn criterion_3() -> Outcome {
    let c = run_check(1000, 50, 303, None).map_err(|e| e.to_string())?;
    check(
        c.failures == 0 && c.max_deviation <= 1e-6 && c.idempotent && c.max_budget_excess <= 1e-9,
        format!(
            "1000 projections, max deviation {:.2e}, max budget excess {:.2e}, idempotent {}",
            c.max_deviation, c.max_budget_excess, c.idempotent
        ),
    )
}

fn criterion_4() -> Outcome {
    let mut r = StdRng::seed_from_u64(404);
    let mut min_slack = f64::INFINITY;
    let mut cases = 0;
    for n in 2..=8 {
        for _ in 0..3 {
            let toy = Toy::random(n, &mut r);
            let s = StructureVector::from_values(random_s(n, &mut r), 0.5).map_err(|e| e.to_string())?;
            for alpha in [0.5, 0.7, 0.9] {
                let ex = exact_moments(|m: &Mask| Ok(toy.eval(m)), &s, alpha).map_err(|e| e.to_string())?;
                let slack = (ex.bound - ex.var_vr_total) / ex.bound.max(1e-300);
                min_slack = min_slack.min(slack);
                cases += 1;
                if ex.var_vr_total > ex.bound {
                    return Err(format!("n={n} alpha={alpha}: variance {:.6e} exceeds bound {:.6e}", ex.var_vr_total, ex.bound));
                }
            }
        }
    }
    for i in 1..100 {
        let s = i as f64 / 100.0;
        for k in 0..50 {
            let (a, b) = (0.5 + k as f64 * 0.01, 0.5 + (k + 1) as f64 * 0.01);
            if bound_term(s, b) > bound_term(s, a) {
                return Err(format!("bound term increases in alpha at s={s}, alpha={a}"));
            }
        }
    }
    Ok(format!("{cases} model/alpha cases within bound (min relative slack {min_slack:.3}), bound term monotone on 99x51 grid"))
}

fn criterion_5(work: &Path) -> Outcome {
    let out = work.join("toy");
    let cfg = configs().join("toy_diagnose.toml");
    cst(&["diagnose", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])?;
    let r = read_json(&out.join("diagnose.json"))?;
    let ratio = r["variance_ratio"].as_f64().unwrap_or(0.0);
    let exact = r["exact"].is_object();
    check(exact && ratio >= 10.0, format!("exact enumeration, Var[PGE]/Var[VR-PGE] = {ratio:.2}"))
}

fn criterion_6() -> Outcome {
    let spec = NetworkSpec::mlp(16, &[512, 512, 512], 10).map_err(|e| e.to_string())?;
    let mut r = StdRng::seed_from_u64(606);
    let params = spec.init_params(&mut r);
    let batch = random_batch(&spec, 4, &mut r);
    let half = |r: &mut StdRng| {
        let mut bits = vec![false; spec.num_channels()];
        for g in spec.channel_groups() {
            let mut idx: Vec<usize> = g.collect();
            for k in (1..idx.len()).rev() {
                idx.swap(k, r.random_range(0..=k));
            }
            for &c in &idx[..idx.len() / 2] {
                bits[c] = true;
            }
        }
        Mask::new(bits)
    };
    let (m1, m2) = (half(&mut r), half(&mut r));
    let ones = Mask::new(vec![true; spec.num_channels()]);
    let sparse = iteration_macs(&spec, &params, &batch, &m1, &m2).map_err(|e| e.to_string())?;
    let dense = iteration_macs(&spec, &params, &batch, &ones, &ones).map_err(|e| e.to_string())?;
    let ratio = sparse as f64 / dense as f64;
    let table = savings(0.0170, 1.0).ours;
    let rel = (table - 44.68).abs() / 44.68;
    check(
        ratio <= 0.30 && rel <= 0.05,
        format!("sparse/dense iteration multiplies {ratio:.4}; savings at 0.0170 = {table:.2}x ({:.1}% from 44.68x)", 100.0 * rel),
    )
}

fn budget_violations(dir: &Path) -> usize {
    metrics(dir)
        .iter()
        .filter(|r| r["s_sum"].as_f64().unwrap() > r["budget"].as_f64().unwrap() + 1e-9)
        .count()
}

fn criterion_7(work: &Path) -> (Outcome, Option<f64>) {
    let blobs = work.join("blobs");
    let b = match train("blobs.toml", &blobs, &[]) {
        Ok(v) => v,
        Err(e) => return (Err(e), None),
    };
    let blob_acc = b["eval_accuracy"].as_f64().unwrap();
    let blob_epochs = b["epochs"].as_u64().unwrap();
    let blob_bad = budget_violations(&blobs);
    let blob_records = metrics(&blobs).len();

    let digits = work.join("digits");
    let start = Instant::now();
    let d = match train("digits.toml", &digits, &[]) {
        Ok(v) => v,
        Err(e) => return (Err(e), None),
    };
    let secs = start.elapsed().as_secs_f64();
    let digit_acc = d["eval_accuracy"].as_f64().unwrap();
    let digit_epochs = d["epochs"].as_u64().unwrap();
    let digit_bad = budget_violations(&digits);
    let ok = blob_acc >= 0.95
        && blob_epochs <= 30
        && blob_bad == 0
        && digit_acc >= 0.90
        && digit_epochs <= 20
        && digit_bad == 0
        && secs <= 900.0;
    let detail = format!(
        "blobs {:.2}% in {blob_epochs} epochs, budget held in {}/{blob_records} records; digits {:.2}% in {digit_epochs} epochs, {secs:.0}s, {digit_bad} budget violations",
        100.0 * blob_acc,
        blob_records - blob_bad,
        100.0 * digit_acc
    );
    (check(ok, detail), Some(digit_acc))
}

fn criterion_8(work: &Path, baseline: Option<f64>) -> Outcome {
    let base = baseline.ok_or("interval-1 digits run unavailable")?;
    let r = train("digits.toml", &work.join("digits50"), &["--override", "train.resample_interval=50"])?;
    let acc = r["eval_accuracy"].as_f64().unwrap();
    let drop = 100.0 * (base - acc);
    check(drop < 2.0, format!("interval 1: {:.2}%, interval 50: {:.2}%, drop {drop:.2} points", 100.0 * base, 100.0 * acc))
}

fn criterion_9(work: &Path) -> Outcome {
    let (a, b, c) = (work.join("det_a"), work.join("det_b"), work.join("det_c"));
    train("blobs.toml", &a, &["--override", "train.epochs=5"])?;
    train("blobs.toml", &b, &["--override", "train.epochs=5"])?;
    train("blobs.toml", &c, &["--override", "train.epochs=3"])?;
    let ck = c.join("checkpoint.json");
    train("blobs.toml", &c, &["--override", "train.epochs=5", "--resume", ck.to_str().unwrap()])?;
    let read = |d: &Path| fs::read(d.join("metrics.jsonl")).unwrap();
    let (ma, mb, mc) = (read(&a), read(&b), read(&c));
    let same_seed = ma == mb;
    let resumed = ma == mc;
    check(
        same_seed && resumed && !ma.is_empty(),
        format!("rerun byte-identical: {same_seed}; 3 epochs + checkpoint + 2 epochs identical to 5: {resumed}"),
    )
}

fn criterion_10(work: &Path) -> Outcome {
    let out = work.join("wide");
    train("wide_blobs.toml", &out, &[])?;
    let cfg = configs().join("wide_blobs.toml");
    let ck = out.join("checkpoint.json");
    cst(&["diagnose", "--config", cfg.to_str().unwrap(), "--checkpoint", ck.to_str().unwrap(), "--out", out.to_str().unwrap()])?;
    let r = read_json(&out.join("diagnose.json"))?;
    let (v, vmax, el2) = (r["v_hat"].as_f64().unwrap(), r["vmax_hat"].as_f64().unwrap(), r["el2_hat"].as_f64().unwrap());
    check(
        vmax / v <= 10.0 && v <= el2,
        format!("V_hat {v:.3e}, Vmax_hat {vmax:.3e}, EL2_hat {el2:.3e}, Vmax/V {:.2}, EL2/V {:.2}", vmax / v, el2 / v),
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let w = work.path();
    let mut outcomes: Vec<(u32, Outcome)> = Vec::new();
    let mut report = |n: u32, o: Outcome| {
        match &o {
            Ok(d) => println!("criterion {n:>2}: PASS  {d}"),
            Err(d) => println!("criterion {n:>2}: FAIL  {d}"),
        }
        outcomes.push((n, o));
    };
    report(1, guarded(criterion_1));
    report(2, guarded(criterion_2));
    report(3, guarded(criterion_3));
    report(4, guarded(criterion_4));
    report(5, guarded(|| criterion_5(w)));
    report(6, guarded(criterion_6));
    let mut digits = None;
    report(
        7,
        guarded(|| {
            let (o, acc) = criterion_7(w);
            digits = acc;
            o
        }),
    );
    report(8, guarded(|| criterion_8(w, digits)));
    report(9, guarded(|| criterion_9(w)));
    report(10, guarded(|| criterion_10(w)));
    let failed: Vec<u32> = outcomes.iter().filter(|(_, o)| o.is_err()).map(|(n, _)| *n).collect();
    println!("acceptance: {} of {} criteria passed", outcomes.len() - failed.len(), outcomes.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
