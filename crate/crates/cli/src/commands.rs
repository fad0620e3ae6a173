use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vila_core::data::{generate_synthetic, read_bag, synthetic_dataset, write_atomic, Dataset};
use vila_core::encoders::{DescriptionConfig, PromptSet};
use vila_core::model::{Aggregator, Fusion, Model, ModelConfig, Similarity};
use vila_core::train::{
    format_table, parallel_map, run_once, worker_threads, ExperimentReport, Metric, RunResult, Summary,
};
use vila_core::{gradcheck, Error, Result};

use crate::config::{Config, SweepAxis};

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub master_seed: u64,
    pub created_at: String,
    pub status: String,
    pub config: Config,
    /// Artifact path relative to the output directory, with its SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

/// Output directory plus the bookkeeping of everything written into it.
pub struct Run {
    out: PathBuf,
    manifest: RunManifest,
}

impl Run {
    /// Creates the directory and writes `run_manifest.json` before
    /// anything else.
    pub fn start(command: &str, config: &Config, out: &Path) -> Result<Self> {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let run = Self {
            out: out.to_path_buf(),
            manifest: RunManifest {
                command: command.to_string(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                master_seed: config.train.seed,
                created_at: chrono::Utc::now().to_rfc3339(),
                status: "running".to_string(),
                config: config.clone(),
                artifacts: BTreeMap::new(),
            },
        };
        run.save_manifest()?;
        Ok(run)
    }

    fn save_manifest(&self) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(&self.manifest)?;
        write_atomic(&self.out.join("run_manifest.json"), &bytes)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.out.join(rel), bytes)?;
        self.record(rel, bytes);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(rel, &bytes)
    }

    fn record(&mut self, rel: &str, bytes: &[u8]) {
        self.manifest
            .artifacts
            .insert(rel.to_string(), hex::encode(Sha256::digest(bytes)));
    }

    /// Records a file some other code already wrote.
    pub fn record_file(&mut self, rel: &str) -> Result<()> {
        let path = self.out.join(rel);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        self.record(rel, &bytes);
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.manifest.status = "complete".to_string();
        self.save_manifest()
    }
}

fn load_dataset(config: &Config) -> Result<Dataset> {
    let dataset = match &config.data.manifest {
        Some(path) => Dataset::load(path)?,
        None => {
            config.synth.validate()?;
            synthetic_dataset(&config.synth)?
        }
    };
    if dataset.manifest.d != config.model.d {
        return Err(Error::Config(format!(
            "model.d: {} but the dataset has feature dimension {}",
            config.model.d, dataset.manifest.d
        )));
    }
    Ok(dataset)
}

fn load_descriptions(config: &Config, class_names: &[String]) -> Result<DescriptionConfig> {
    match &config.data.descriptions {
        Some(path) => DescriptionConfig::load(path),
        None => Ok(DescriptionConfig::for_classes(class_names)),
    }
}

fn build_prompts(model: &ModelConfig, class_names: &[String], descriptions: &DescriptionConfig) -> Result<PromptSet> {
    PromptSet::build(class_names, descriptions, model.d, model.vocab_seed, model.encoder_seed)
}

struct Prepared {
    dataset: Dataset,
    descriptions: DescriptionConfig,
    prompts: PromptSet,
}

fn prepare(config: &Config) -> Result<Prepared> {
    config.model.validate()?;
    config.train.validate()?;
    let dataset = load_dataset(config)?;
    let names = dataset.manifest.class_names.clone();
    let descriptions = load_descriptions(config, &names)?;
    let prompts = build_prompts(&config.model, &names, &descriptions)?;
    Ok(Prepared {
        dataset,
        descriptions,
        prompts,
    })
}

pub fn synth(config: &Config, out: &Path) -> Result<()> {
    config.synth.validate()?;
    let mut run = Run::start("synth", config, out)?;
    let (manifest, report) = generate_synthetic(&config.synth, out)?;
    for entry in &manifest.bags {
        run.record_file(&entry.path.to_string_lossy())?;
    }
    run.record_file("manifest.json")?;
    run.write_json("separability.json", &report)?;
    println!(
        "wrote {} bags ({} classes, d = {}) to {}",
        manifest.bags.len(),
        manifest.n_classes(),
        manifest.d,
        out.display()
    );
    println!(
        "planted-direction accuracy: low {:.3}, high {:.3}, dual {:.3}",
        report.low_only, report.high_only, report.dual
    );
    run.finish()
}

/// What `vila train` stores: everything needed to rebuild the model and its
/// prompts.
#[derive(Debug, Serialize, Deserialize)]
pub struct SavedModel {
    pub class_names: Vec<String>,
    pub descriptions: DescriptionConfig,
    pub model: Model,
}

pub fn train(config: &Config, out: &Path) -> Result<()> {
    let p = prepare(config)?;
    let mut run = Run::start("train", config, out)?;
    let result = run_once(&p.dataset, &p.prompts, &config.model, &config.train, 0)?;
    let outcome = result.outcome.clone().expect("fresh run keeps its curve");
    let saved = SavedModel {
        class_names: p.dataset.manifest.class_names.clone(),
        descriptions: p.descriptions,
        model: Model {
            config: config.model.clone(),
            params: result.params.clone().expect("fresh run keeps its parameters"),
        },
    };
    run.write_json("params.json", &saved)?;
    run.write("curve.csv", outcome.curve_csv().as_bytes())?;
    run.write_json("report.json", &result)?;
    println!(
        "test AUC {:.3}  F1 {:.3}  ACC {:.3}  (best epoch {} of {}, params checksum {:016x})",
        result.test.auc, result.test.f1, result.test.acc, result.best_epoch, result.epochs_run, result.params_checksum
    );
    run.finish()
}

fn write_curves(run: &mut Run, prefix: &str, runs: &[RunResult]) -> Result<()> {
    for r in runs {
        if let Some(o) = &r.outcome {
            run.write(&format!("{prefix}run_{}.csv", r.run), o.curve_csv().as_bytes())?;
        }
    }
    Ok(())
}

pub const FULL_MODEL: &str = "full";

pub fn experiment(config: &Config, out: &Path) -> Result<()> {
    let p = prepare(config)?;
    let mut run = Run::start("experiment", config, out)?;
    let report = run_arms(&p, &config.train, &[(FULL_MODEL.to_string(), config.model.clone())])?
        .pop()
        .expect("one arm");
    write_curves(&mut run, "curves/", &report.runs)?;
    run.write_json("report.json", &report)?;
    let table = report.table();
    run.write("report.txt", table.as_bytes())?;
    print!("{table}");
    run.finish()
}

/// Runs every `(name, model)` arm for `train.runs` runs. All runs of all
/// arms share one worker pool; results do not depend on scheduling.
fn run_arms(p: &Prepared, train: &vila_core::train::TrainConfig, arms: &[(String, ModelConfig)]) -> Result<Vec<ExperimentReport>> {
    for (_, m) in arms {
        m.validate()?;
    }
    let runs = train.runs;
    let results = parallel_map(arms.len() * runs, worker_threads(), |job| {
        let (arm, r) = (job / runs, job % runs);
        info!("arm {} run {r}", arms[arm].0);
        run_once(&p.dataset, &p.prompts, &arms[arm].1, train, r)
    });
    let mut results = results.into_iter();
    arms.iter()
        .map(|(name, _)| {
            let runs = results.by_ref().take(runs).collect::<Result<Vec<_>>>()?;
            Ok(ExperimentReport::from_runs(name.clone(), runs))
        })
        .collect()
}

/// The fixed ablation grid, relative to the configured full model.
pub fn ablation_arms(full: &ModelConfig) -> Vec<(String, String, ModelConfig)> {
    let with = |f: &dyn Fn(&mut ModelConfig)| {
        let mut m = full.clone();
        f(&mut m);
        m
    };
    let low = |m: &mut ModelConfig| m.alpha_high = 0.0;
    let high = |m: &mut ModelConfig| m.alpha_low = 0.0;
    vec![
        ("abmil_low", "gated attention MIL, low scale, prompts without text decoder", with(&|m| {
            m.aggregator = Aggregator::Abmil;
            m.text_decoder = false;
            low(m);
        })),
        ("abmil_high", "gated attention MIL, high scale, prompts without text decoder", with(&|m| {
            m.aggregator = Aggregator::Abmil;
            m.text_decoder = false;
            high(m);
        })),
        ("decoder_low", "prototype patch decoder, low scale only", with(&|m| {
            m.text_decoder = false;
            low(m);
        })),
        ("decoder_high", "prototype patch decoder, high scale only", with(&|m| {
            m.text_decoder = false;
            high(m);
        })),
        ("decoder_dual", "prototype patch decoder, both scales", with(&|m| m.text_decoder = false)),
        (FULL_MODEL, "patch decoder and text decoder, both scales", full.clone()),
        ("mean_pool", "full model, mean pooling instead of the patch decoder", with(&|m| {
            m.aggregator = Aggregator::MeanPool
        })),
        ("attention_pool", "full model, attention pooling over patches", with(&|m| {
            m.aggregator = Aggregator::AttentionPool
        })),
        ("self_attention_pool", "full model, self-attention then mean pooling", with(&|m| {
            m.aggregator = Aggregator::SelfAttentionPool
        })),
        ("feature_summation", "full model, scales fused before the similarity", with(&|m| {
            m.fusion = Fusion::FeatureSummation
        })),
        ("instance_max", "full model, max of patch-level similarities", with(&|m| {
            m.similarity = Similarity::InstanceMax
        })),
        ("instance_topk", "full model, top-k mean of patch-level similarities", with(&|m| {
            m.similarity = Similarity::InstanceTopk
        })),
        ("instance_mean", "full model, mean of patch-level similarities", with(&|m| {
            m.similarity = Similarity::InstanceMean
        })),
    ]
    .into_iter()
    .map(|(n, d, m)| (n.to_string(), d.to_string(), m))
    .collect()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AblationArm {
    pub name: String,
    pub description: String,
    pub model: ModelConfig,
    /// Paired t-test p-values against the full model, by metric.
    pub p_values: BTreeMap<String, Option<f64>>,
    pub report: ExperimentReport,
}

pub fn ablate(config: &Config, out: &Path) -> Result<()> {
    let p = prepare(config)?;
    let arms = ablation_arms(&config.model);
    let mut run = Run::start("ablate", config, out)?;
    let named: Vec<(String, ModelConfig)> = arms.iter().map(|(n, _, m)| (n.clone(), m.clone())).collect();
    let reports = run_arms(&p, &config.train, &named)?;
    let full = reports
        .iter()
        .find(|r| r.name == FULL_MODEL)
        .expect("grid contains the full model");
    let mut rows = Vec::new();
    let mut csv = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Config(format!("csv: {e}"));
    csv.write_record([
        "arm", "auc_mean", "auc_std", "f1_mean", "f1_std", "acc_mean", "acc_std", "p_auc", "p_f1", "p_acc",
    ])
    .map_err(csv_err)?;
    for ((name, description, model), report) in arms.iter().zip(&reports) {
        let mut p_values = BTreeMap::new();
        let mut record = vec![name.clone()];
        for m in Metric::ALL {
            let s = report.summary(m);
            record.push(s.mean.to_string());
            record.push(s.std.to_string());
        }
        for m in Metric::ALL {
            let p = report.compare(full, m).ok().map(|t| t.p);
            record.push(p.map_or(String::new(), |v| v.to_string()));
            p_values.insert(m.label().to_lowercase(), p);
        }
        csv.write_record(&record).map_err(csv_err)?;
        rows.push(AblationArm {
            name: name.clone(),
            description: description.clone(),
            model: model.clone(),
            p_values,
            report: report.clone(),
        });
    }
    let csv_bytes = csv.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
    let refs: Vec<&ExperimentReport> = reports.iter().collect();
    let table = format_table(&refs, Some(full));
    run.write_json("ablation.json", &rows)?;
    run.write("ablation.csv", &csv_bytes)?;
    run.write("ablation.txt", table.as_bytes())?;
    print!("{table}");
    run.finish()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: usize,
    pub status: String,
    pub auc: Option<Summary>,
    pub f1: Option<Summary>,
    pub acc: Option<Summary>,
}

pub fn sweep(config: &Config, out: &Path) -> Result<()> {
    let p = prepare(config)?;
    let axis = config.sweep.axis;
    let values = config.sweep.values.clone().unwrap_or_else(|| axis.default_values());
    if values.is_empty() {
        return Err(Error::Config("sweep.values: empty".into()));
    }
    let mut run = Run::start("sweep", config, out)?;
    let mut rows = Vec::new();
    let mut csv = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Config(format!("csv: {e}"));
    csv.write_record(["axis", "value", "auc_mean", "auc_std", "f1_mean", "f1_std", "acc_mean", "acc_std", "status"])
        .map_err(csv_err)?;
    for &v in &values {
        let mut model = config.model.clone();
        let mut train = config.train.clone();
        match axis {
            SweepAxis::NPrototypes => model.n_prototypes = v,
            SweepAxis::NContext => model.n_context = v,
            SweepAxis::Shots => train.shots = v,
        }
        train.validate()?;
        let name = format!("{}={v}", axis.name());
        let row = match run_arms(&p, &train, &[(name, model)]) {
            Ok(mut r) => {
                let r = r.pop().expect("one arm");
                SweepRow {
                    axis: axis.name().into(),
                    value: v,
                    status: "ok".into(),
                    auc: Some(r.auc),
                    f1: Some(r.f1),
                    acc: Some(r.acc),
                }
            }
            Err(Error::Protocol(msg)) => {
                warn!("{}={v} skipped: {msg}", axis.name());
                SweepRow {
                    axis: axis.name().into(),
                    value: v,
                    status: format!("skipped: {msg}"),
                    auc: None,
                    f1: None,
                    acc: None,
                }
            }
            Err(e) => return Err(e),
        };
        let mut record = vec![row.axis.clone(), v.to_string()];
        for s in [row.auc, row.f1, row.acc] {
            record.push(s.map_or(String::new(), |s| s.mean.to_string()));
            record.push(s.map_or(String::new(), |s| s.std.to_string()));
        }
        record.push(row.status.clone());
        csv.write_record(&record).map_err(csv_err)?;
        println!(
            "{}={v}: {}",
            axis.name(),
            match &row.acc {
                Some(a) => format!("ACC {}", a.percent()),
                None => row.status.clone(),
            }
        );
        rows.push(row);
    }
    run.write("sweep.csv", &csv.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?)?;
    run.write_json("sweep.json", &rows)?;
    run.finish()
}

pub fn explain(config: &Config, out: &Path) -> Result<()> {
    let params_path = config
        .explain
        .params
        .as_ref()
        .ok_or_else(|| Error::Config("explain.params: path to params.json is required".into()))?;
    let bag_path = config
        .explain
        .bag
        .as_ref()
        .ok_or_else(|| Error::Config("explain.bag: path to a bag file is required".into()))?;
    let text = std::fs::read_to_string(params_path).map_err(|e| Error::io(params_path, e))?;
    let saved: SavedModel =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", params_path.display())))?;
    saved.model.config.validate()?;
    let bag = read_bag(bag_path)?;
    let prompts = build_prompts(&saved.model.config, &saved.class_names, &saved.descriptions)?;
    let mut run = Run::start("explain", config, out)?;
    let explanation = saved.model.explain(&prompts, &bag)?;
    run.write_json("explanation.json", &explanation)?;
    // a closed pipe (e.g. `| head`) is not an error here
    let _ = writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(&explanation)?);
    run.finish()
}

/// Returns whether every check passed.
pub fn gradcheck(config: &Config, out: &Path) -> Result<bool> {
    let mut run = Run::start("gradcheck", config, out)?;
    let report = gradcheck::run(config.train.seed)?;
    run.write_json("gradcheck.json", &report)?;
    println!("{:<24} {:>12}  result", "check", "rel. error");
    for (kind, checks) in [("op", &report.ops), ("param", &report.parameters)] {
        for c in checks {
            println!(
                "{:<24} {:>12.3e}  {}",
                format!("{kind} {}", c.name),
                c.relative_error,
                if c.passed { "ok" } else { "FAIL" }
            );
        }
    }
    let passed = report.passed();
    println!(
        "{} (tolerance {:e})",
        if passed { "all checks passed" } else { "gradient check FAILED" },
        report.tolerance
    );
    run.finish()?;
    Ok(passed)
}
