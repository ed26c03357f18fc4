use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, ensure, Context, Result};
use rand::Rng;
use serde::Serialize;
use stackpool::bench::{self, BenchConfig, BenchReport, OrderingCheck};
use stackpool::checkpoint::{self, Provenance};
use stackpool::data::{self, assign_splits, crop_patches, load_dataset, synthesize_scene, CrowdSample, Dataset};
use stackpool::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use stackpool::metrics::{evaluate_counts, group_by_density, invariance_study, DensityGroup, STACKED, VANILLA};
use stackpool::networks::{Network, NetworkConfig};
use stackpool::pooling::{verify_equivalence, PoolVariant};
use stackpool::training::{train_with, TrainConfig, TrainEvent, CURVE_ALPHA};
use stackpool::{seed, PoolSpec, Tensor};

use crate::config::RunConfig;
use crate::run::{Check, Run};

fn required<'a>(value: &'a Option<PathBuf>, what: &str, flag: &str, key: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| anyhow!("no {what} given: pass {flag} or set `{key}` in the config file"))
}

fn open_dataset(path: &Path) -> Result<Dataset> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

pub fn gen_data(cfg: RunConfig, force: bool) -> Result<bool> {
    let d = cfg.data.clone();
    let root = cfg.seed;
    let mut run = Run::start("gen-data", cfg, force)?;
    let labels = assign_splits(d.scenes, d.test, seed::derive(root, "split"))?;
    let samples = (0..d.scenes)
        .map(|i| synthesize_scene(format!("{i:04}"), seed::derive(root, &format!("scene/{i}")), &d.scene))
        .zip(labels)
        .map(|(s, l)| s.map(|s| (s, l)))
        .collect::<stackpool::Result<Vec<_>>>()?;
    let manifest = data::write_dataset(run.out(), &samples, Some(root), Some(d.scene.clone()))?;
    run.record("manifest.json")?;
    for entry in &manifest.samples {
        run.record(&entry.image)?;
        run.record(&entry.annotation)?;
    }
    println!(
        "wrote {} scenes ({} heads) to {}",
        manifest.samples.len(),
        manifest.total_heads,
        run.out().display()
    );
    run.finish()
}

pub fn train(cfg: RunConfig, force: bool, check: bool) -> Result<bool> {
    let t = cfg.train.clone();
    let root = cfg.seed;
    let dataset_path = required(&t.dataset, "dataset", "--dataset", "train.dataset")?.to_path_buf();
    let split = open_dataset(&dataset_path)?.into_split();
    ensure!(!split.train.is_empty(), "dataset {} has no training samples", dataset_path.display());
    let mut run = Run::start("train", cfg, force)?;

    let net_config = NetworkConfig {
        output_relu: t.output_relu,
        ..NetworkConfig::new(t.net, t.pool.clone())
    };
    let factor = net_config.downsampling();
    let net: Network = Network::build(net_config, seed::derive(root, "init"));
    let train_set: Vec<CrowdSample> = if t.patches == 0 {
        split.train.clone()
    } else {
        let patch_seed = seed::derive(root, "patches");
        split
            .train
            .iter()
            .map(|s| crop_patches(s, t.patches, factor, patch_seed))
            .collect::<stackpool::Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect()
    };
    println!(
        "training {} with {} on {} samples ({} validation images)",
        t.net,
        t.pool,
        train_set.len(),
        split.validation.len()
    );
    let train_config = TrainConfig {
        epochs: t.epochs,
        batch_size: t.batch_size,
        validate_every: t.validate_every,
        adam: t.adam,
        seed: seed::derive(root, "train"),
    };
    let mut best_bytes = None;
    let mut failure = None;
    let result = train_with(net, &train_set, &split.validation, &train_config, |event| match event {
        TrainEvent::Epoch(r) => {
            let val = r.val_mae.map(|v| format!(" val_mae {v:.4}")).unwrap_or_default();
            println!(
                "epoch {:>4}/{} loss {:.6} train_mae {:.4}{val}",
                r.epoch, train_config.epochs, r.train_loss, r.train_mae
            );
        }
        TrainEvent::NewBest { net, epoch, val_mae } => {
            let prov = Provenance {
                seed: root,
                epoch,
                val_mae: Some(val_mae),
            };
            match checkpoint::encode(net, prov) {
                Ok(bytes) => {
                    if let Err(e) = fs::write(run.path("best.ckpt"), &bytes) {
                        failure.get_or_insert(anyhow!(e).context("writing best.ckpt"));
                    }
                    best_bytes = Some(bytes);
                }
                Err(e) => {
                    failure.get_or_insert(e.into());
                }
            }
        }
    });
    let outcome = match result {
        Ok(o) => o,
        Err(abort) => {
            run.write("train_log.csv", abort.log.to_csv())?;
            run.finish()?;
            return Err(anyhow!(abort.error)).context("training aborted; partial log in train_log.csv");
        }
    };
    if let Some(e) = failure {
        return Err(e);
    }
    let log = &outcome.log;
    let last_epoch = log.records.len();
    let best_bytes = match best_bytes {
        Some(b) => b,
        None => checkpoint::encode(
            &outcome.best,
            Provenance {
                seed: root,
                epoch: last_epoch,
                val_mae: None,
            },
        )?,
    };
    run.write("best.ckpt", &best_bytes)?;
    let last = checkpoint::encode(
        &outcome.last,
        Provenance {
            seed: root,
            epoch: last_epoch,
            val_mae: log.records.last().and_then(|r| r.val_mae),
        },
    )?;
    run.write("last.ckpt", last)?;
    run.write("train_log.csv", log.to_csv())?;
    run.write("train_curves.csv", log.smoothed_csv(CURVE_ALPHA)?)?;
    let summary = log.summary();
    run.write_json("train_summary.json", &summary)?;
    match (summary.best_epoch, summary.best_val_mae) {
        (Some(e), Some(m)) => println!("best validation MAE {m:.4} at epoch {e}"),
        _ => println!("no validation set; best.ckpt holds the final weights"),
    }
    if check {
        let (first, last) = (summary.initial_train_loss.unwrap_or(f64::NAN), summary.final_train_loss.unwrap_or(f64::NAN));
        run.check(Check::new("training loss decreased", last < first, format!("{first:.6} -> {last:.6}")));
    }
    run.finish()
}

#[derive(Serialize)]
struct EvalSummary {
    checkpoint: String,
    pool: String,
    split: String,
    images: usize,
    mae: f64,
    mse: f64,
    groups: Vec<DensityGroup>,
}

pub fn eval(cfg: RunConfig, force: bool) -> Result<bool> {
    let e = cfg.eval.clone();
    let ckpt = required(&e.checkpoint, "checkpoint", "--checkpoint", "eval.checkpoint")?.to_path_buf();
    let dataset_path = required(&e.dataset, "dataset", "--dataset", "eval.dataset")?.to_path_buf();
    let (net, manifest) = checkpoint::load::<f64>(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let samples = open_dataset(&dataset_path)?.split_of(e.split);
    ensure!(!samples.is_empty(), "split `{}` of {} is empty", e.split, dataset_path.display());
    let mut run = Run::start("eval", cfg, force)?;
    let result = evaluate_counts(&net, &samples)?;
    let groups = group_by_density(&result, e.buckets)?;
    println!("{} images: MAE {:.4} MSE {:.4}", samples.len(), result.mae, result.mse);
    for g in &groups {
        println!("  counts {}..{} ({} images): MAE {:.4}", g.min_count, g.max_count, g.len, g.mae);
    }
    run.write("counts.csv", result.to_csv())?;
    run.write_json(
        "eval.json",
        &EvalSummary {
            checkpoint: ckpt.display().to_string(),
            pool: manifest.pool.to_string(),
            split: e.split.to_string(),
            images: samples.len(),
            mae: result.mae,
            mse: result.mse,
            groups,
        },
    )?;
    run.finish()
}

#[derive(Serialize)]
struct EquivalenceRow {
    multi: String,
    stacked: String,
    trials: usize,
    max_forward_diff: f64,
    max_gradient_diff: f64,
}

#[derive(Serialize)]
struct VerifyReport {
    equivalence: Vec<EquivalenceRow>,
    grad_checks: Vec<GradCheckReport>,
}

fn as_multi_kernel(spec: &PoolSpec) -> Result<PoolSpec> {
    Ok(match spec.variant() {
        PoolVariant::MultiKernel => spec.clone(),
        PoolVariant::Stacked => spec.to_multi_kernel()?,
        PoolVariant::Vanilla => PoolSpec::multi_kernel(spec.kernels(), spec.stride())?,
    })
}

pub fn verify(cfg: RunConfig, force: bool) -> Result<bool> {
    let v = cfg.verify.clone();
    let root = cfg.seed;
    ensure!(v.trials >= 1 && v.max_extent >= 1 && v.max_channels >= 1, "trials, max_extent and max_channels must be at least 1");
    // Reject unreachable kernel sets before creating any output.
    let specs = v
        .pools
        .iter()
        .map(|s| {
            let multi = as_multi_kernel(s)?;
            multi.to_stacked().with_context(|| format!("{multi} has no stacked equivalent"))?;
            Ok(multi)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut run = Run::start("verify", cfg, force)?;
    let mut report = VerifyReport {
        equivalence: Vec::new(),
        grad_checks: Vec::new(),
    };
    for multi in &specs {
        let mut rng = seed::stream(root, &format!("verify/{multi}"));
        let (mut fwd, mut grad) = (0.0f64, 0.0f64);
        let mut stacked = String::new();
        for _ in 0..v.trials {
            let c = rng.random_range(1..=v.max_channels);
            let h = rng.random_range(1..=v.max_extent);
            let w = rng.random_range(1..=v.max_extent);
            let values = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = Tensor::from_vec(&[1, c, h, w], values)?;
            let eq = verify_equivalence(&x, multi, None)?;
            fwd = fwd.max(eq.forward_max_abs_diff);
            grad = grad.max(eq.gradient_max_abs_diff);
            stacked = eq.stacked.to_string();
        }
        run.check(Check::new(
            format!("{multi} == {stacked}"),
            fwd == 0.0 && grad == 0.0,
            format!("{} trials, max forward diff {fwd:e}, max gradient diff {grad:e}", v.trials),
        ));
        report.equivalence.push(EquivalenceRow {
            multi: multi.to_string(),
            stacked,
            trials: v.trials,
            max_forward_diff: fwd,
            max_gradient_diff: grad,
        });
    }
    if v.grad_check {
        let mut rng = seed::stream(root, "verify/grad-check");
        let extent = v.grad_extent;
        let image = Tensor::from_vec(&[1, 1, extent, extent], (0..extent * extent).map(|_| rng.random::<f64>()).collect())?;
        let pools = [
            PoolSpec::vanilla(2, 2)?,
            PoolSpec::stacked(&[2, 2, 3], 2)?,
            PoolSpec::multi_kernel(&[2, 4, 8], 2)?,
        ];
        let base: Network = Network::build(NetworkConfig::new(v.grad_net, pools[0].clone()), seed::derive(root, "verify/grad-net"));
        let f = base.config().downsampling();
        ensure!(extent % f == 0, "grad_extent {extent} is not divisible by {f}");
        let target = Tensor::from_vec(
            &[1, 1, extent / f, extent / f],
            (0..(extent / f) * (extent / f)).map(|_| 0.05 * rng.random::<f64>()).collect(),
        )?;
        let gc = GradCheckConfig {
            per_tensor: (v.grad_per_tensor > 0).then_some(v.grad_per_tensor),
            seed: seed::derive(root, "verify/grad-coords"),
            ..GradCheckConfig::default()
        };
        for pool in pools {
            let r = grad_check(&base.with_pool(pool.clone()), &image, &target, &gc)?;
            run.check(Check::new(
                format!("{} gradients with {pool}", v.grad_net),
                r.max_rel_error < v.grad_tolerance,
                format!(
                    "{} coordinates, {} skipped at kinks, max relative error {:e}",
                    r.entries.len(),
                    r.skipped,
                    r.max_rel_error
                ),
            ));
            report.grad_checks.push(r);
        }
    }
    run.write_json("verify.json", &report)?;
    run.finish()
}

#[derive(Serialize)]
struct BenchOutput<'a> {
    report: &'a BenchReport,
    orderings: Vec<OrderingCheck>,
    regressions: Vec<OrderingCheck>,
}

pub fn bench(cfg: RunConfig, force: bool, check: bool) -> Result<bool> {
    let b = cfg.bench.clone();
    let baseline: Option<BenchReport> = match &b.baseline {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading baseline {}", path.display()))?;
            let value: serde_json::Value = serde_json::from_str(&text)?;
            // Accept either a bare report or a previous bench.json.
            let report = value.get("report").cloned().unwrap_or(value);
            Some(serde_json::from_value(report).with_context(|| format!("parsing baseline {}", path.display()))?)
        }
        None => None,
    };
    if check {
        ensure!(
            b.reps >= bench::MIN_REPS && b.warmups >= bench::MIN_WARMUPS,
            "ordering checks need at least {} repetitions and {} warm-ups",
            bench::MIN_REPS,
            bench::MIN_WARMUPS
        );
    }
    let bench_config = BenchConfig {
        reps: b.reps,
        warmups: b.warmups,
        layer_extent: b.layer_extent,
        arch: b.net,
        net_extent: b.net_extent,
        dtype: b.dtype,
        pools: b.pools.clone(),
        seed: seed::derive(cfg.seed, "bench"),
    };
    let mut run = Run::start("bench", cfg, force)?;
    println!("{}", bench_config.protocol());
    let report = bench::run(&bench_config)?;
    for c in &report.cases {
        println!(
            "{:<14} {:<18} {:>10.4} ms (IQR {:.4})",
            c.scenario.name(),
            c.pool,
            c.median_ms,
            c.iqr_ms
        );
    }
    let orderings = report.orderings();
    let regressions = baseline.as_ref().map(|base| report.regressions(base)).unwrap_or_default();
    for o in &orderings {
        if check {
            run.check(Check::new(o.name.clone(), o.holds, o.detail.clone()));
        } else {
            println!("{} {}: {}", if o.holds { "holds" } else { "violated" }, o.name, o.detail);
        }
    }
    if baseline.is_some() {
        run.check(Check::new(
            "no ordering regressions against baseline",
            regressions.is_empty(),
            regressions.iter().map(|r| r.name.clone()).collect::<Vec<_>>().join("; "),
        ));
    }
    run.write("bench.csv", report.to_csv())?;
    run.write_json(
        "bench.json",
        &BenchOutput {
            report: &report,
            orderings,
            regressions,
        },
    )?;
    run.finish()
}

pub fn invariance(cfg: RunConfig, force: bool, check: bool) -> Result<bool> {
    let i = cfg.invariance.clone();
    let a = required(&i.vanilla, "first checkpoint", "--vanilla", "invariance.vanilla")?.to_path_buf();
    let b = required(&i.stacked, "second checkpoint", "--stacked", "invariance.stacked")?.to_path_buf();
    let dataset_path = required(&i.dataset, "dataset", "--dataset", "invariance.dataset")?.to_path_buf();
    let (net_a, _) = checkpoint::load::<f64>(&a).with_context(|| format!("loading {}", a.display()))?;
    let (net_b, _) = checkpoint::load::<f64>(&b).with_context(|| format!("loading {}", b.display()))?;
    let samples = open_dataset(&dataset_path)?.split_of(i.split);
    ensure!(!samples.is_empty(), "split `{}` of {} is empty", i.split, dataset_path.display());
    let mut run = Run::start("invariance", cfg, force)?;
    let report = invariance_study(&net_a, &net_b, &samples, i.beta, i.threshold)?;
    for s in &report.summary {
        let mean = s.mean_gamma.map(|g| format!("{g:.6}")).unwrap_or_else(|| "n/a".into());
        println!(
            "{:<8} layer {}: mean γ {mean} ({} kept, {} outliers, {} undefined)",
            s.variant, s.layer, s.retained, s.outliers, s.missing
        );
    }
    if check {
        for layer in 0..net_a.config().pool_sites() {
            let (va, st) = (report.mean(VANILLA, layer), report.mean(STACKED, layer));
            let holds = matches!((va, st), (Some(va), Some(st)) if st < va);
            run.check(Check::new(
                format!("layer {layer}: mean γ stacked < vanilla"),
                holds,
                format!("{st:?} vs {va:?}"),
            ));
        }
    }
    run.write("invariance.csv", report.to_csv())?;
    run.write("invariance_scatter.csv", report.scatter_csv())?;
    run.write_json("invariance.json", &report)?;
    run.finish()
}
