//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. Criteria run one after another so the
//! timing-sensitive ones are not disturbed by concurrent work.

#[path = "../../core/tests/common/gamma_oracle.rs"]
mod gamma_oracle;

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::Rng;
use stackpool::bench::{self, BenchConfig};
use stackpool::data::{density_map, synthesize_scene, Head, SceneParams, DENSITY_SIGMA};
use stackpool::gradcheck::{grad_check, GradCheckConfig};
use stackpool::metrics::{mae_mse, variation_ratio, variation_ratio_maps};
use stackpool::networks::{Architecture, Network, NetworkConfig};
use stackpool::pooling::verify_equivalence;
use stackpool::{seed, PoolSpec, Tensor};

type Outcome = Result<String, String>;

fn within(limit: Duration, started: Instant, detail: String) -> Outcome {
    let took = started.elapsed();
    if took < limit {
        Ok(format!("{detail}; {:.1} s", took.as_secs_f64()))
    } else {
        Err(format!("{detail}; took {:.1} s, limit {} s", took.as_secs_f64(), limit.as_secs()))
    }
}

fn equivalence() -> Outcome {
    let started = Instant::now();
    let mut rng = seed::stream(1, "acceptance/equivalence");
    let mut details = Vec::new();
    for kernels in [&[2, 4][..], &[2, 4, 8], &[2, 4, 8, 16]] {
        let multi = PoolSpec::multi_kernel(kernels, 2).map_err(|e| e.to_string())?;
        let (mut fwd, mut grad) = (0.0f64, 0.0f64);
        let mut stacked = String::new();
        for trial in 0..100 {
            // The first trial is always the largest extent.
            let (c, h, w) = if trial == 0 {
                (4, 64, 64)
            } else {
                (rng.random_range(1..=4), rng.random_range(1..=64), rng.random_range(1..=64))
            };
            let x = Tensor::from_vec(&[1, c, h, w], (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
                .map_err(|e| e.to_string())?;
            let eq = verify_equivalence(&x, &multi, None).map_err(|e| e.to_string())?;
            fwd = fwd.max(eq.forward_max_abs_diff);
            grad = grad.max(eq.gradient_max_abs_diff);
            stacked = eq.stacked.to_string();
        }
        let line = format!("{multi} vs {stacked}: forward {fwd:e}, gradient {grad:e}");
        if fwd != 0.0 || grad != 0.0 {
            return Err(line);
        }
        details.push(line);
    }
    if !details[2].contains("stacked:2,2,3,5:s2") {
        return Err(format!("unexpected derived kernels: {}", details[2]));
    }
    within(Duration::from_secs(10), started, details.join("; "))
}

fn gradients() -> Outcome {
    let started = Instant::now();
    let mut rng = seed::stream(2, "acceptance/gradients");
    let image = Tensor::from_vec(&[1, 1, 32, 32], (0..1024).map(|_| rng.random::<f64>()).collect()).unwrap();
    let target = Tensor::from_vec(&[1, 1, 8, 8], (0..64).map(|_| 0.05 * rng.random::<f64>()).collect()).unwrap();
    let base = Network::build(
        NetworkConfig::new(Architecture::BaseS, PoolSpec::vanilla(2, 2).unwrap()),
        seed::derive(2, "acceptance/net"),
    );
    let cfg = GradCheckConfig {
        per_tensor: Some(48),
        seed: 3,
        ..GradCheckConfig::default()
    };
    let mut details = Vec::new();
    let mut ok = true;
    for pool in ["vanilla:2:s2", "stacked:2,2,3:s2", "multi:2,4,8:s2"] {
        let net = base.with_pool(pool.parse().unwrap());
        let r = grad_check(&net, &image, &target, &cfg).map_err(|e| e.to_string())?;
        ok &= r.max_rel_error < 1e-4 && !r.entries.is_empty();
        details.push(format!(
            "{pool}: {} coords ({} ties skipped), max rel {:.2e}",
            r.entries.len(),
            r.skipped,
            r.max_rel_error
        ));
    }
    let detail = details.join("; ");
    if !ok {
        return Err(detail);
    }
    within(Duration::from_secs(60), started, detail)
}

fn timing() -> Outcome {
    let started = Instant::now();
    let cfg = BenchConfig {
        reps: 40,
        warmups: 8,
        layer_extent: 256,
        arch: Architecture::Deep,
        ..BenchConfig::default()
    };
    let report = bench::run(&cfg).map_err(|e| e.to_string())?;
    let orderings = report.orderings();
    let detail = orderings
        .iter()
        .map(|o| format!("{} [{}] {}", o.name, if o.holds { "ok" } else { "violated" }, o.detail))
        .collect::<Vec<_>>()
        .join("; ");
    if orderings.len() != 5 || orderings.iter().any(|o| !o.holds) {
        return Err(detail);
    }
    within(Duration::from_secs(300), started, detail)
}

fn density_mass() -> Outcome {
    let started = Instant::now();
    let mut rng = seed::stream(4, "acceptance/density");
    let margin = 4.0 * DENSITY_SIGMA;
    let heads: Vec<Head> = (0..1000)
        .map(|_| Head::new(rng.random_range(margin..128.0 - margin), rng.random_range(margin..128.0 - margin)))
        .collect();
    let total: f64 = density_map(&heads, 128, 128, DENSITY_SIGMA).unwrap().data().iter().sum();
    let rel = (total - 1000.0).abs() / 1000.0;
    let corner: f64 = density_map(&[Head::new(0.0, 0.0)], 128, 128, DENSITY_SIGMA).unwrap().data().iter().sum();
    let detail = format!("1000 heads relative error {rel:.2e}, corner mass {corner:.4}");
    if rel >= 1e-3 || !(0.24..=0.26).contains(&corner) {
        return Err(detail);
    }
    within(Duration::from_secs(30), started, detail)
}

fn metric_identities() -> Outcome {
    let cases: [(&[(f64, f64)], (f64, f64)); 4] = [
        (&[(4.0, 4.0), (9.0, 9.0)], (0.0, 0.0)),
        (&[(3.0, 4.0), (5.0, 4.0)], (1.0, 1.0)),
        (&[(0.0, 4.0), (8.0, 4.0)], (4.0, 4.0)),
        (&[(0.0, 4.0), (4.0, 4.0)], (2.0, 8f64.sqrt())),
    ];
    for (pairs, expected) in cases {
        let got = mae_mse(pairs).map_err(|e| e.to_string())?;
        if got != expected {
            return Err(format!("{pairs:?}: got {got:?}, expected {expected:?}"));
        }
    }
    let mut rng = seed::stream(5, "acceptance/metrics");
    for i in 0..1000 {
        let n = rng.random_range(1..50);
        let pairs: Vec<(f64, f64)> = (0..n).map(|_| (rng.random_range(0.0..500.0), rng.random_range(0.0..500.0))).collect();
        let (mae, mse) = mae_mse(&pairs).unwrap();
        if mse < mae * (1.0 - 1e-12) {
            return Err(format!("set {i}: MSE {mse} < MAE {mae}"));
        }
    }
    Ok("example sets exact; MSE >= MAE on 1000 random sets".into())
}

fn variation_ratio_properties() -> Outcome {
    let scene = synthesize_scene("fixed", 77, &SceneParams::default()).unwrap();
    let image = scene.network_input();
    for (arch, pool) in [
        (Architecture::BaseS, "vanilla:2:s2"),
        (Architecture::BaseM, "stacked:2,2,3:s2"),
        (Architecture::Deep, "multi:2,4,8:s2"),
    ] {
        let net = Network::build(NetworkConfig::new(arch, pool.parse().unwrap()), 6);
        let sites: Vec<usize> = (0..net.config().pool_sites()).collect();
        let g = variation_ratio(&net, &image, 1.0, &sites).map_err(|e| e.to_string())?;
        if g.iter().any(|v| *v != Some(0.0)) {
            return Err(format!("{arch} {pool} at β=1: {g:?}"));
        }
    }
    let mut rng = seed::stream(6, "acceptance/gamma");
    let x = Tensor::from_vec(&[1, 4, 6, 6], (0..144).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let doubled = Tensor::from_vec(x.shape(), x.data().iter().map(|v| 2.0 * v).collect()).unwrap();
    let g = variation_ratio_maps(&x, &doubled).unwrap();
    if g != Some(1.0) {
        return Err(format!("2X gave {g:?}"));
    }
    let net = Network::build(NetworkConfig::new(Architecture::BaseM, "vanilla:2:s2".parse().unwrap()), 1234);
    let lib = variation_ratio(&net, &image, 2.0, &[0, 1]).map_err(|e| e.to_string())?;
    let oracle = gamma_oracle::gamma(&net, &image, 2.0);
    let mut worst = 0.0f64;
    for (a, b) in lib.iter().zip(&oracle) {
        match (a, b) {
            (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
            _ => return Err(format!("undefined γ: library {lib:?}, scripted {oracle:?}")),
        }
    }
    let detail = format!("β=1 gives 0, 2X gives 1, scripted recomputation differs by {worst:.1e}");
    if worst < 1e-10 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn stackpool(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_stackpool"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "stackpool {} failed: {}{}",
            args.first().unwrap_or(&""),
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn json(path: &Path) -> Result<serde_json::Value, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn mean_gamma(report: &serde_json::Value, variant: &str, layer: u64) -> Option<f64> {
    report["summary"]
        .as_array()?
        .iter()
        .find(|s| s["variant"] == variant && s["layer"] == layer)?["mean_gamma"]
        .as_f64()
}

fn desk_scale_study(dir: &Path) -> Outcome {
    let started = Instant::now();
    let data = dir.join("data");
    stackpool(&["gen-data", "--seed", "2024", "--scenes", "300", "--test", "100", "--out", p(&data)])?;
    let mut maes = Vec::new();
    for (name, pool) in [("vanilla", "vanilla:2:s2"), ("stacked", "stacked:2,2,3:s2")] {
        let run = dir.join(format!("train-{name}"));
        stackpool(&[
            "train", "--seed", "2024", "--dataset", p(&data), "--net", "base_s", "--pool", pool, "--epochs", "100", "--out",
            p(&run),
        ])?;
        let eval = dir.join(format!("eval-{name}"));
        stackpool(&["eval", "--checkpoint", p(&run.join("best.ckpt")), "--dataset", p(&data), "--out", p(&eval)])?;
        let summary = json(&eval.join("eval.json"))?;
        maes.push(format!(
            "{name} test MAE {:.3} MSE {:.3}",
            summary["mae"].as_f64().unwrap_or(f64::NAN),
            summary["mse"].as_f64().unwrap_or(f64::NAN)
        ));
    }
    let inv = dir.join("invariance");
    stackpool(&[
        "invariance",
        "--vanilla",
        p(&dir.join("train-vanilla/best.ckpt")),
        "--stacked",
        p(&dir.join("train-stacked/best.ckpt")),
        "--dataset",
        p(&data),
        "--out",
        p(&inv),
    ])?;
    let report = json(&inv.join("invariance.json"))?;
    let mut lower_everywhere = true;
    let mut layers = Vec::new();
    for layer in 0..2 {
        let (v, s) = (mean_gamma(&report, "vanilla", layer), mean_gamma(&report, "stacked", layer));
        lower_everywhere &= matches!((v, s), (Some(v), Some(s)) if s < v);
        let show = |g: Option<f64>| g.map(|g| format!("{g:.4}")).unwrap_or_else(|| "n/a".into());
        layers.push(format!("layer {layer} mean γ vanilla {} stacked {}", show(v), show(s)));
    }
    let detail = format!("{}; {}", maes.join(", "), layers.join(", "));
    if !lower_everywhere {
        return Err(detail);
    }
    within(Duration::from_secs(1800), started, detail)
}

fn artifacts(run: &Path) -> Result<toml::Table, String> {
    let text = fs::read_to_string(run.join("manifest.toml")).map_err(|e| e.to_string())?;
    let mut doc: toml::Table = toml::from_str(&text).map_err(|e| e.to_string())?;
    match doc.remove("artifacts") {
        Some(toml::Value::Table(t)) if !t.is_empty() => Ok(t),
        _ => Err(format!("{} lists no artifacts", run.display())),
    }
}

/// Re-runs `run` from its manifest into `<run>-rerun` and compares every
/// recorded artifact byte for byte.
fn rerun_matches(run: &Path) -> Result<usize, String> {
    let again = run.with_file_name(format!("{}-rerun", run.file_name().unwrap().to_string_lossy()));
    let command = fs::read_to_string(run.join("manifest.toml"))
        .ok()
        .and_then(|t| t.parse::<toml::Table>().ok())
        .and_then(|t| t.get("command").and_then(|c| c.as_str()).map(str::to_owned))
        .ok_or_else(|| format!("{} has no command", run.display()))?;
    stackpool(&[&command, "--config", p(&run.join("manifest.toml")), "--out", p(&again)])?;
    let (a, b) = (artifacts(run)?, artifacts(&again)?);
    if a != b {
        return Err(format!("{command}: artifact hashes differ"));
    }
    for rel in a.keys() {
        let same = fs::read(run.join(rel)).ok() == fs::read(again.join(rel)).ok();
        if !same {
            return Err(format!("{command}: {rel} differs"));
        }
    }
    Ok(a.len())
}

fn determinism(dir: &Path) -> Outcome {
    let data = dir.join("data");
    stackpool(&["gen-data", "--seed", "8", "--scenes", "20", "--test", "4", "--height", "32", "--width", "32", "--out", p(&data)])?;
    let mut runs = vec![data.clone()];
    for (name, pool) in [("vanilla", "vanilla:2:s2"), ("stacked", "stacked:2,2,3:s2")] {
        let run = dir.join(format!("train-{name}"));
        stackpool(&[
            "train", "--seed", "8", "--dataset", p(&data), "--pool", pool, "--epochs", "4", "--patches", "2", "--out", p(&run),
        ])?;
        runs.push(run);
    }
    let eval = dir.join("eval");
    stackpool(&["eval", "--checkpoint", p(&runs[1].join("best.ckpt")), "--dataset", p(&data), "--out", p(&eval)])?;
    let inv = dir.join("invariance");
    stackpool(&[
        "invariance",
        "--vanilla",
        p(&runs[1].join("best.ckpt")),
        "--stacked",
        p(&runs[2].join("best.ckpt")),
        "--dataset",
        p(&data),
        "--out",
        p(&inv),
    ])?;
    let verify = dir.join("verify");
    stackpool(&["verify", "--seed", "8", "--trials", "10", "--max-extent", "24", "--out", p(&verify)])?;
    runs.extend([eval, inv, verify]);
    let mut checked = 0;
    for run in &runs {
        checked += rerun_matches(run)?;
    }
    Ok(format!("{} manifest re-runs reproduced {checked} artifacts bit for bit", runs.len()))
}

fn main() -> ExitCode {
    let work = tempfile::tempdir().expect("temporary directory");
    let study = work.path().join("study");
    let repro = work.path().join("repro");
    fs::create_dir_all(&study).unwrap();
    fs::create_dir_all(&repro).unwrap();

    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("1 stacked/multi-kernel equivalence", Box::new(equivalence)),
        ("2 end-to-end gradient check", Box::new(gradients)),
        ("3 pooling cost orderings", Box::new(timing)),
        ("4 density-map mass", Box::new(density_mass)),
        ("5 metric identities", Box::new(metric_identities)),
        ("6 variation-ratio properties", Box::new(variation_ratio_properties)),
        ("7 desk-scale invariance study", Box::new(move || desk_scale_study(&study))),
        ("8 manifest determinism", Box::new(move || determinism(&repro))),
    ];
    let only = std::env::args().nth(1).filter(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (name, run) in &criteria {
        if only.as_deref().is_some_and(|o| !name.starts_with(o)) {
            continue;
        }
        match run() {
            Ok(detail) => println!("[PASS] criterion {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] criterion {name}: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
