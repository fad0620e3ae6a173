//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use vila_core::data::{synthetic_dataset, Bag, SynthConfig};
use vila_core::encoders::{DescriptionConfig, PromptSet};
use vila_core::metrics::{accuracy, auc_macro, binary_auc, f1_macro};
use vila_core::model::{Model, ModelConfig, Similarity};
use vila_core::train::{run_experiment, run_once, RunPlan, Summary, TrainConfig};
use vila_core::{gradcheck, Tensor};

type Outcome = Result<String, String>;

// Mean test ACC of the first verified benchmark run (5 runs each).
const GOLDEN_DUAL_ACC: f64 = 0.972;
const GOLDEN_LOW_ACC: f64 = 0.656;
const GOLDEN_HIGH_ACC: f64 = 0.672;
const GOLDEN_TOLERANCE: f64 = 0.05;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn random_bag(rng: &mut ChaCha8Rng, d: usize, label: usize) -> Bag {
    let nl = rng.random_range(1..12);
    let nh = rng.random_range(1..30);
    let low = random_tensor(rng, nl, d);
    let high = random_tensor(rng, nh, d);
    Bag::new("random".to_string(), label, low, high).unwrap()
}

fn permute_rows(rng: &mut ChaCha8Rng, t: &Tensor) -> Tensor {
    let mut order: Vec<usize> = (0..t.rows()).collect();
    order.shuffle(rng);
    let data = order.iter().flat_map(|&r| t.row(r).to_vec()).collect();
    Tensor::new(t.rows(), t.cols(), data).unwrap()
}

fn small_model(seed: u64, config: ModelConfig) -> (Model, PromptSet) {
    let names: Vec<String> = (0..3).map(|c| format!("class_{c}")).collect();
    let prompts = PromptSet::build(
        &names,
        &DescriptionConfig::for_classes(&names),
        config.d,
        config.vocab_seed,
        config.encoder_seed,
    )
    .unwrap();
    (Model::new(config, seed).unwrap(), prompts)
}

fn small_config() -> ModelConfig {
    ModelConfig {
        d: 12,
        n_prototypes: 4,
        n_context: 3,
        tau: 0.1,
        ..ModelConfig::default()
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let report = gradcheck::run(0).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let worst = report
        .parameters
        .iter()
        .map(|c| c.relative_error)
        .fold(0.0, f64::max);
    ensure(report.parameters.len() == 12, || {
        format!("expected 12 parameter groups, got {}", report.parameters.len())
    })?;
    ensure(report.passed(), || {
        let names: Vec<String> = report.failures().iter().map(|c| format!("{} {:.2e}", c.name, c.relative_error)).collect();
        format!("failing checks: {}", names.join(", "))
    })?;
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} groups, worst relative error {worst:.2e}, {} ops checked, {:.2}s",
        report.parameters.len(),
        report.ops.len(),
        elapsed.as_secs_f64()
    ))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (model, prompts) = small_model(11, small_config());
    let mut worst = 0.0f64;
    for i in 0..100 {
        let bag = random_bag(&mut rng, 12, i % 3);
        let shuffled = Bag::new(
            "shuffled".to_string(),
            bag.label,
            permute_rows(&mut rng, &bag.low),
            permute_rows(&mut rng, &bag.high),
        )
        .unwrap();
        let a = model.forward(&prompts, &bag).map_err(|e| e.to_string())?;
        let b = model.forward(&prompts, &shuffled).map_err(|e| e.to_string())?;
        for (x, y) in a.fused.iter().zip(&b.fused) {
            worst = worst.max((x - y).abs());
        }
    }
    ensure(worst <= 1e-9, || format!("drift {worst:.3e}"))?;
    Ok(format!("100 bags, max drift {worst:.2e}"))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let modes = [
        Similarity::BagLevel,
        Similarity::InstanceMax,
        Similarity::InstanceMean,
        Similarity::InstanceTopk,
    ];
    let mut worst_sum = 0.0f64;
    let mut worst_norm = 0.0f64;
    for i in 0..1000 {
        let (alpha_low, alpha_high) = match i % 3 {
            0 => (rng.random_range(0.1..2.0), rng.random_range(0.1..2.0)),
            1 => (rng.random_range(0.1..2.0), 0.0),
            _ => (0.0, rng.random_range(0.1..2.0)),
        };
        let config = ModelConfig {
            alpha_low,
            alpha_high,
            similarity: modes[i % modes.len()],
            ..small_config()
        };
        let (model, prompts) = small_model(i as u64, config);
        let bag = random_bag(&mut rng, 12, 0);
        let diag = model.forward(&prompts, &bag).map_err(|e| e.to_string())?;
        let total: f64 = diag.fused.iter().sum();
        worst_sum = worst_sum.max((total - (alpha_low + alpha_high)).abs());
        worst_norm = worst_norm.max((diag.normalized().iter().sum::<f64>() - 1.0).abs());
    }
    ensure(worst_sum <= 1e-6 && worst_norm <= 1e-6, || {
        format!("sum error {worst_sum:.3e}, normalized error {worst_norm:.3e}")
    })?;
    Ok(format!(
        "1000 forwards, max |ΣP − (α_l+α_h)| {worst_sum:.2e}, max |ΣP̂ − 1| {worst_norm:.2e}"
    ))
}

fn brute_force_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let mut half_wins = 0u64;
    let mut pairs = 0u64;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if positive[i] && !positive[j] {
                pairs += 1;
                half_wins += if si > sj { 2 } else if si == sj { 1 } else { 0 };
            }
        }
    }
    (half_wins as f64 / 2.0) / pairs as f64
}

/// Macro F1 and accuracy computed from an explicit confusion matrix.
fn confusion_oracle(pred: &[usize], labels: &[usize], c: usize) -> (f64, f64) {
    let mut cm = vec![vec![0usize; c]; c];
    for (&p, &l) in pred.iter().zip(labels) {
        cm[l][p] += 1;
    }
    let diag: usize = (0..c).map(|k| cm[k][k]).sum();
    let acc = diag as f64 / labels.len() as f64;
    let mut f1s = Vec::new();
    for k in 0..c {
        let actual: usize = cm[k].iter().sum();
        let predicted: usize = (0..c).map(|r| cm[r][k]).sum();
        if actual == 0 && predicted == 0 {
            continue;
        }
        let p = if predicted > 0 { cm[k][k] as f64 / predicted as f64 } else { 0.0 };
        let r = if actual > 0 { cm[k][k] as f64 / actual as f64 } else { 0.0 };
        f1s.push(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 });
    }
    (f1s.iter().sum::<f64>() / f1s.len() as f64, acc)
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..1000 {
        let n = rng.random_range(2..40);
        let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        // scores on a coarse dyadic grid: ties happen and 1 − p is exact
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0..=16) as f64 / 16.0).collect();
        let rows: Vec<Vec<f64>> = p.iter().map(|&x| vec![1.0 - x, x]).collect();
        let positive: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        let expected = brute_force_auc(&p, &positive);
        let got = auc_macro(&rows, &labels, 2).map_err(|e| e.to_string())?;
        ensure(got == expected, || format!("case {case}: auc {got} vs brute force {expected}"))?;

        let c = rng.random_range(2..5);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let (f1, acc) = confusion_oracle(&pred, &labels, c);
        let got_f1 = f1_macro(&pred, &labels, c).map_err(|e| e.to_string())?;
        let got_acc = accuracy(&pred, &labels).map_err(|e| e.to_string())?;
        ensure(got_f1 == f1 && got_acc == acc, || {
            format!("case {case}: f1 {got_f1} vs {f1}, acc {got_acc} vs {acc}")
        })?;
    }
    let worked = binary_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]);
    ensure(worked == Some(0.75), || format!("worked fixture gave {worked:?}"))?;
    Ok("1000 binary AUC cases and 1000 F1/ACC cases exact, worked fixture 0.75".into())
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let dataset = synthetic_dataset(&SynthConfig::default()).map_err(|e| e.to_string())?;
    let full = ModelConfig {
        tau: 0.1,
        ..ModelConfig::default()
    };
    let names = dataset.manifest.class_names.clone();
    let prompts = PromptSet::build(
        &names,
        &DescriptionConfig::for_classes(&names),
        full.d,
        full.vocab_seed,
        full.encoder_seed,
    )
    .map_err(|e| e.to_string())?;
    let train = TrainConfig::default();
    let arm = |name: &str, m: &ModelConfig| -> Result<f64, String> {
        let r = run_experiment(name, &dataset, &prompts, m, &train).map_err(|e| e.to_string())?;
        Ok(r.acc.mean)
    };
    let dual = arm("dual", &full)?;
    let low = arm("low", &ModelConfig { alpha_high: 0.0, ..full.clone() })?;
    let high = arm("high", &ModelConfig { alpha_low: 0.0, ..full.clone() })?;
    let elapsed = start.elapsed();
    let detail = format!(
        "mean ACC dual {dual:.3}, low {low:.3}, high {high:.3}; {:.0}s",
        elapsed.as_secs_f64()
    );
    ensure(dual >= 0.90, || format!("dual below 0.90: {detail}"))?;
    ensure(dual - low >= 0.10 && dual - high >= 0.10, || format!("single-scale gap below 0.10: {detail}"))?;
    for (name, got, golden) in [
        ("dual", dual, GOLDEN_DUAL_ACC),
        ("low", low, GOLDEN_LOW_ACC),
        ("high", high, GOLDEN_HIGH_ACC),
    ] {
        ensure((got - golden).abs() <= GOLDEN_TOLERANCE, || {
            format!("{name} {got:.3} outside golden {golden} ± {GOLDEN_TOLERANCE}: {detail}")
        })?;
    }
    ensure(elapsed < Duration::from_secs(600), || format!("over 10 minutes: {detail}"))?;
    Ok(detail)
}

fn criterion_6() -> Outcome {
    let synth = SynthConfig {
        noise_std: 0.0,
        ..SynthConfig::default()
    };
    let dataset = synthetic_dataset(&synth).map_err(|e| e.to_string())?;
    let model = ModelConfig {
        tau: 0.1,
        ..ModelConfig::default()
    };
    let names = dataset.manifest.class_names.clone();
    let prompts = PromptSet::build(
        &names,
        &DescriptionConfig::for_classes(&names),
        model.d,
        model.vocab_seed,
        model.encoder_seed,
    )
    .map_err(|e| e.to_string())?;
    let train = TrainConfig {
        max_epochs: 80,
        ..TrainConfig::default()
    };
    let mut reached = Vec::new();
    for run in 0..5 {
        let result = run_once(&dataset, &prompts, &model, &train, run).map_err(|e| e.to_string())?;
        let curve = result.outcome.expect("fresh run keeps its curve").curve;
        let first = curve.iter().find(|r| r.epoch <= 80 && r.train_acc == 1.0).map(|r| r.epoch);
        ensure(first.is_some(), || {
            let best = curve.iter().map(|r| r.train_acc).fold(0.0, f64::max);
            format!("run {run} never reached training accuracy 1.0 (best {best:.3})")
        })?;
        reached.push(first.unwrap());
    }
    Ok(format!("training accuracy 1.0 reached at epochs {reached:?}"))
}

fn vila(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_vila"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("vila {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr))
    })
}

fn read_json(path: &Path) -> Result<Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

const TINY: &str = r#"{
  "synth": {"n_classes": 3, "bags_per_class": 12, "d": 16},
  "model": {"d": 16, "n_prototypes": 4, "n_context": 4, "tau": 0.1},
  "train": {"min_epochs": 5, "patience": 3, "max_epochs": 10, "shots": 4, "runs": 3}
}"#;

fn criterion_7(dir: &Path) -> Outcome {
    let cfg = dir.join("tiny.json");
    std::fs::write(&cfg, TINY).map_err(|e| e.to_string())?;
    let cfg = cfg.to_str().unwrap();
    let ablate = dir.join("c7_ablate");
    let experiment = dir.join("c7_experiment");
    vila(&["ablate", "--config", cfg, "--seed", "5", "--out", ablate.to_str().unwrap()])?;
    vila(&["experiment", "--config", cfg, "--seed", "5", "--out", experiment.to_str().unwrap()])?;
    let arms = read_json(&ablate.join("ablation.json"))?;
    let arms = arms.as_array().ok_or("ablation.json is not an array")?;
    ensure(arms.len() == 13, || format!("{} arms", arms.len()))?;
    let full: Vec<&Value> = arms.iter().filter(|a| a["name"] == "full").collect();
    ensure(full.len() == 1, || "no unique full-model arm".into())?;
    let report = read_json(&experiment.join("report.json"))?;
    ensure(full[0]["report"] == report, || "full-model arm differs from experiment report".into())?;
    let csv_rows = std::fs::read_to_string(ablate.join("ablation.csv")).map_err(|e| e.to_string())?.lines().count();
    ensure(csv_rows == 14, || format!("ablation.csv has {csv_rows} lines"))?;
    Ok("13 arms; full-model arm identical to experiment report".into())
}

fn criterion_8() -> Outcome {
    let dataset = synthetic_dataset(&SynthConfig::default()).map_err(|e| e.to_string())?;
    let labels = dataset.labels();
    let config = TrainConfig::default();
    for run in 0..config.runs {
        let plan = RunPlan::new(&dataset, &config, run).map_err(|e| e.to_string())?;
        for (c, counts) in plan.split_counts(&labels, dataset.n_classes()).iter().enumerate() {
            let n = counts.iter().sum::<usize>() as f64;
            for (k, share) in [0.4, 0.3, 0.3].iter().enumerate() {
                ensure((counts[k] as f64 - share * n).abs() <= 1.0, || {
                    format!("run {run} class {c}: split {counts:?}")
                })?;
            }
            let shots = plan.train.iter().filter(|&&i| labels[i] == c).count();
            ensure(shots == 16, || format!("run {run} class {c}: {shots} training bags"))?;
        }
    }
    let formatted = Summary::of(&[0.80, 0.85, 0.90, 0.85, 0.85]).percent();
    ensure(formatted == "85.0 ± 3.5", || format!("formatted as {formatted:?}"))?;
    Ok(format!("4:3:3 per class within ±1, 16 shots per class, \"{formatted}\""))
}

fn artifacts(dir: &Path) -> Result<BTreeMap<String, String>, String> {
    let manifest = read_json(&dir.join("run_manifest.json"))?;
    ensure(manifest["status"] == "complete", || format!("{}: not complete", dir.display()))?;
    serde_json::from_value(manifest["artifacts"].clone()).map_err(|e| e.to_string())
}

fn criterion_9(dir: &Path) -> Outcome {
    let cfg = dir.join("tiny.json");
    std::fs::write(&cfg, TINY).map_err(|e| e.to_string())?;
    let cfg = cfg.to_str().unwrap().to_string();
    let out = |name: &str, rep: usize| dir.join(format!("c9_{name}_{rep}")).to_str().unwrap().to_string();
    let synth = out("synth", 0);
    let train = out("train", 0);
    let commands: Vec<(&str, Vec<String>)> = vec![
        ("synth", vec![]),
        ("train", vec![format!("data.manifest={synth}/manifest.json")]),
        ("experiment", vec![]),
        ("ablate", vec!["train.runs=2".into()]),
        ("sweep", vec!["sweep.axis=n_context".into(), "sweep.values=[1,2]".into()]),
        (
            "explain",
            vec![
                format!("explain.params={train}/params.json"),
                format!("explain.bag={synth}/bags/bag_0000.vlmb"),
            ],
        ),
        ("gradcheck", vec![]),
    ];
    let mut total = 0;
    for rep in 0..2 {
        for (name, extra) in &commands {
            let dest = out(name, rep);
            let mut args: Vec<&str> = vec![name, "--config", &cfg, "--seed", "9", "--out", &dest];
            args.extend(extra.iter().map(String::as_str));
            vila(&args)?;
        }
    }
    for (name, _) in &commands {
        let a = artifacts(Path::new(&out(name, 0)))?;
        let b = artifacts(Path::new(&out(name, 1)))?;
        ensure(!a.is_empty(), || format!("{name}: no artifacts recorded"))?;
        ensure(a == b, || format!("{name}: checksums differ between repeats"))?;
        total += a.len();
    }
    Ok(format!("{} commands run twice, {total} artifact checksums identical", commands.len()))
}

fn main() {
    let dir = tempfile::tempdir().expect("temporary directory");
    let criteria: Vec<(u32, Box<dyn Fn() -> Outcome>)> = vec![
        (1, Box::new(criterion_1)),
        (2, Box::new(criterion_2)),
        (3, Box::new(criterion_3)),
        (4, Box::new(criterion_4)),
        (5, Box::new(criterion_5)),
        (6, Box::new(criterion_6)),
        (7, Box::new(|| criterion_7(dir.path()))),
        (8, Box::new(criterion_8)),
        (9, Box::new(|| criterion_9(dir.path()))),
    ];
    let mut failed = 0;
    for (n, check) in criteria {
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {n}: PASS ({detail})"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n}: FAIL ({detail})");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
