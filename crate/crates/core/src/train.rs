//! Optimization and the repeated few-shot experiment protocol.

use std::fmt::Write as _;

use log::{debug, info};
use rayon::prelude::*;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{few_shot_sample, split_dataset, Bag, Dataset, Split, SplitRatio};
use crate::encoders::PromptSet;
use crate::error::{Error, Result};
use crate::metrics::{accuracy, auc, f1_score, mean_std, paired_t_test, Averaging, TTest};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::seed::{derive_seed, fnv1a, rng_for};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Classic L2: `λθ` is added to the gradient before the Adam moments.
    pub weight_decay: f64,
    pub min_epochs: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub shots: usize,
    pub runs: usize,
    pub seed: u64,
    pub averaging: Averaging,
    pub split: SplitRatio,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            min_epochs: 80,
            patience: 20,
            max_epochs: 200,
            batch_size: 1,
            shots: 16,
            runs: 5,
            seed: 0,
            averaging: Averaging::Macro,
            split: SplitRatio::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::Config(format!("train.{field}: {msg}")));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate", "must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be nonnegative");
        }
        if self.min_epochs == 0 {
            return bad("min_epochs", "must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience", "must be at least 1");
        }
        if self.max_epochs < self.min_epochs {
            return bad("max_epochs", "must be at least min_epochs");
        }
        if self.batch_size != 1 {
            return bad("batch_size", "only 1 is supported");
        }
        if self.shots == 0 {
            return bad("shots", "must be at least 1");
        }
        if self.runs == 0 {
            return bad("runs", "must be at least 1");
        }
        Ok(())
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        let zeros: Vec<Tensor> = shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn for_params(params: &ModelParams) -> Self {
        let shapes: Vec<(usize, usize)> = params.named().iter().map(|(_, t)| t.shape()).collect();
        Self::new(&shapes)
    }

    /// One bias-corrected Adam update. Nothing is modified if any gradient
    /// is non-finite; the error names the offending group.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
        names: &[String],
        learning_rate: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Config(format!(
                "adam: {} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params[i].shape() {
                return Err(Error::Config(format!("adam: gradient shape mismatch for {}", names[i])));
            }
            if !g.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient in parameter group {}", names[i])));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((theta, &g), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(grads[i].data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = if weight_decay != 0.0 { g + weight_decay * *theta } else { g };
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *theta -= learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch.
    pub loss: f64,
    /// Accuracy of the predictions made during the epoch, before each update.
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub epochs_run: usize,
}

impl TrainOutcome {
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("epoch,loss,train_acc,val_acc\n");
        for r in &self.curve {
            let _ = writeln!(s, "{},{},{},{}", r.epoch, r.loss, r.train_acc, r.val_acc);
        }
        s
    }
}

/// Predictions of `model` on `bags`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Normalized fused probabilities, one row per bag.
    pub scores: Vec<Vec<f64>>,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Evaluation {
    pub fn accuracy(&self) -> Result<f64> {
        accuracy(&self.predictions, &self.labels)
    }

    pub fn metrics(&self, n_classes: usize, averaging: Averaging) -> Result<Metrics> {
        Ok(Metrics {
            auc: auc(&self.scores, &self.labels, n_classes, averaging)?,
            f1: f1_score(&self.predictions, &self.labels, n_classes, averaging)?,
            acc: self.accuracy()?,
        })
    }
}

pub fn evaluate(model: &Model, prompts: &PromptSet, bags: &[&Bag]) -> Result<Evaluation> {
    let mut eval = Evaluation {
        scores: Vec::with_capacity(bags.len()),
        predictions: Vec::with_capacity(bags.len()),
        labels: Vec::with_capacity(bags.len()),
    };
    for bag in bags {
        let diag = model.forward(prompts, bag)?;
        eval.predictions.push(diag.prediction());
        eval.scores.push(diag.normalized());
        eval.labels.push(bag.label);
    }
    Ok(eval)
}

/// Trains in place with batch size 1 and early stopping on validation
/// accuracy; the parameters of the best validation epoch are restored.
pub fn train(
    model: &mut Model,
    prompts: &PromptSet,
    train_bags: &[&Bag],
    val_bags: &[&Bag],
    config: &TrainConfig,
    order_seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_bags.is_empty() {
        return Err(Error::Protocol("training set is empty".into()));
    }
    if val_bags.is_empty() {
        return Err(Error::Protocol("validation set is empty".into()));
    }
    let names: Vec<String> = model.params.named().into_iter().map(|(n, _)| n).collect();
    let mut adam = AdamState::for_params(&model.params);
    let mut order: Vec<usize> = (0..train_bags.len()).collect();
    let mut curve = Vec::new();
    let mut best: Option<(usize, f64, ModelParams)> = None;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng_for(order_seed, "epoch", epoch as u64));
        let mut total_loss = 0.0;
        let mut correct = 0usize;
        for &i in &order {
            let bag = train_bags[i];
            let (loss, diag, grads) = model.loss_and_grads(prompts, bag)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss on bag {} at epoch {epoch}", bag.id)));
            }
            total_loss += loss;
            correct += usize::from(diag.prediction() == bag.label);
            let mut params = model.params.tensors_mut();
            adam.step(&mut params, &grads, &names, config.learning_rate, config.weight_decay)?;
        }
        let val_acc = evaluate(model, prompts, val_bags)?.accuracy()?;
        let record = EpochRecord {
            epoch,
            loss: total_loss / train_bags.len() as f64,
            train_acc: correct as f64 / train_bags.len() as f64,
            val_acc,
        };
        debug!("epoch {epoch}: loss {:.4} val_acc {:.3}", record.loss, val_acc);
        curve.push(record);
        if best.as_ref().is_none_or(|(_, acc, _)| val_acc > *acc) {
            best = Some((epoch, val_acc, model.params.clone()));
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.0);
        if epoch >= config.min_epochs && epoch - best_epoch >= config.patience {
            break;
        }
    }
    let (best_epoch, best_val_acc, params) = best.expect("at least one epoch ran");
    model.params = params;
    Ok(TrainOutcome {
        epochs_run: curve.len(),
        curve,
        best_epoch,
        best_val_acc,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: f64,
    pub f1: f64,
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run: usize,
    pub seed: u64,
    pub test: Metrics,
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// FNV-1a of the split assignment; equal across arms sharing a seed.
    pub split_checksum: u64,
    /// `[train, val, test]` per class.
    pub split_counts: Vec<[usize; 3]>,
    pub train_per_class: Vec<usize>,
    pub params_checksum: u64,
    #[serde(skip)]
    pub outcome: Option<TrainOutcome>,
    #[serde(skip)]
    pub params: Option<ModelParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self { mean, std }
    }

    /// Percent with one decimal, e.g. `84.3 ± 4.6`.
    pub fn percent(&self) -> String {
        format!("{:.1} ± {:.1}", 100.0 * self.mean, 100.0 * self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub runs: Vec<RunResult>,
    pub auc: Summary,
    pub f1: Summary,
    pub acc: Summary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Auc,
    F1,
    Acc,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Auc, Metric::F1, Metric::Acc];

    pub fn of(self, m: &Metrics) -> f64 {
        match self {
            Metric::Auc => m.auc,
            Metric::F1 => m.f1,
            Metric::Acc => m.acc,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Metric::Auc => "AUC",
            Metric::F1 => "F1",
            Metric::Acc => "ACC",
        }
    }
}

impl ExperimentReport {
    pub fn from_runs(name: impl Into<String>, runs: Vec<RunResult>) -> Self {
        let pick = |m: Metric| Summary::of(&runs.iter().map(|r| m.of(&r.test)).collect::<Vec<_>>());
        Self {
            name: name.into(),
            auc: pick(Metric::Auc),
            f1: pick(Metric::F1),
            acc: pick(Metric::Acc),
            runs,
        }
    }

    pub fn values(&self, metric: Metric) -> Vec<f64> {
        self.runs.iter().map(|r| metric.of(&r.test)).collect()
    }

    pub fn summary(&self, metric: Metric) -> Summary {
        match metric {
            Metric::Auc => self.auc,
            Metric::F1 => self.f1,
            Metric::Acc => self.acc,
        }
    }

    /// Paired t-test of this report's per-run values against `other`'s.
    pub fn compare(&self, other: &ExperimentReport, metric: Metric) -> Result<TTest> {
        paired_t_test(&self.values(metric), &other.values(metric))
    }

    /// Aligned text table in percent.
    pub fn table(&self) -> String {
        format_table(&[self], None)
    }
}

/// One row per report; with `reference`, a p-value column per metric from a
/// paired t-test against it.
pub fn format_table(reports: &[&ExperimentReport], reference: Option<&ExperimentReport>) -> String {
    let name_w = reports.iter().map(|r| r.name.chars().count()).max().unwrap_or(0).max("Method".len());
    let mut header = format!("{:<name_w$}", "Method");
    for m in Metric::ALL {
        let _ = write!(header, "  {:>13}", m.label());
        if reference.is_some() {
            let _ = write!(header, "  {:>9}", format!("p({})", m.label()));
        }
    }
    let mut out = header.trim_end().to_string();
    out.push('\n');
    for r in reports {
        let mut line = format!("{:<name_w$}", r.name);
        for m in Metric::ALL {
            let _ = write!(line, "  {:>13}", r.summary(m).percent());
            if let Some(base) = reference {
                let p = match r.compare(base, m) {
                    Ok(t) => format_p(t.p),
                    Err(_) => "-".to_string(),
                };
                let _ = write!(line, "  {p:>9}");
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

pub fn format_p(p: f64) -> String {
    if p < 1e-12 {
        "<1e-12".to_string()
    } else if p < 1e-3 {
        format!("{p:.1e}")
    } else {
        format!("{p:.3}")
    }
}

/// Number of worker threads: `VILA_THREADS` if set, else the available
/// parallelism.
pub fn worker_threads() -> usize {
    std::env::var("VILA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `jobs` closures on a pool of at most `threads` workers and returns
/// the results in job order.
pub fn parallel_map<T: Send, F: Fn(usize) -> T + Sync + Send>(jobs: usize, threads: usize, f: F) -> Vec<T> {
    let threads = threads.clamp(1, jobs.max(1));
    if threads == 1 {
        return (0..jobs).map(&f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(|| (0..jobs).into_par_iter().map(&f).collect()),
        Err(_) => (0..jobs).map(&f).collect(),
    }
}

/// Seeds used by one run, all derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub run: u64,
    pub split: u64,
    pub shots: u64,
    pub init: u64,
    pub order: u64,
}

impl RunSeeds {
    pub fn derive(master: u64, run: usize) -> Self {
        let r = derive_seed(master, "run", run as u64);
        Self {
            run: r,
            split: derive_seed(r, "split", 0),
            shots: derive_seed(r, "shots", 0),
            init: derive_seed(r, "init", 0),
            order: derive_seed(r, "order", 0),
        }
    }
}

/// Split assignment and few-shot training subset of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunPlan {
    pub seeds: RunSeeds,
    pub assignment: Vec<Split>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl RunPlan {
    pub fn new(dataset: &Dataset, config: &TrainConfig, run: usize) -> Result<Self> {
        let seeds = RunSeeds::derive(config.seed, run);
        let labels = dataset.labels();
        let n_classes = dataset.n_classes();
        let assignment = split_dataset(&labels, n_classes, config.split, seeds.split)?;
        let pick = |s: Split| -> Vec<usize> { (0..labels.len()).filter(|&i| assignment[i] == s).collect() };
        let candidates = pick(Split::Train);
        let train = few_shot_sample(&labels, &candidates, n_classes, config.shots, seeds.shots)?;
        Ok(Self {
            seeds,
            val: pick(Split::Val),
            test: pick(Split::Test),
            assignment,
            train,
        })
    }

    pub fn checksum(&self) -> u64 {
        let bytes: Vec<u8> = self
            .assignment
            .iter()
            .map(|s| match s {
                Split::Train => 0u8,
                Split::Val => 1,
                Split::Test => 2,
            })
            .chain(self.train.iter().flat_map(|i| (*i as u64).to_le_bytes()))
            .collect();
        fnv1a(&bytes)
    }

    pub fn split_counts(&self, labels: &[usize], n_classes: usize) -> Vec<[usize; 3]> {
        let mut counts = vec![[0usize; 3]; n_classes];
        for (i, s) in self.assignment.iter().enumerate() {
            let k = match s {
                Split::Train => 0,
                Split::Val => 1,
                Split::Test => 2,
            };
            counts[labels[i]][k] += 1;
        }
        counts
    }
}

/// One run: plan, initialize, train, evaluate on the test split.
pub fn run_once(
    dataset: &Dataset,
    prompts: &PromptSet,
    model_config: &ModelConfig,
    config: &TrainConfig,
    run: usize,
) -> Result<RunResult> {
    let plan = RunPlan::new(dataset, config, run)?;
    let bags = |idx: &[usize]| -> Vec<&Bag> { idx.iter().map(|&i| &dataset.bags[i]).collect() };
    let mut model = Model::new(model_config.clone(), plan.seeds.init)?;
    let outcome = train(
        &mut model,
        prompts,
        &bags(&plan.train),
        &bags(&plan.val),
        config,
        plan.seeds.order,
    )?;
    let n_classes = dataset.n_classes();
    let test = evaluate(&model, prompts, &bags(&plan.test))?.metrics(n_classes, config.averaging)?;
    let labels = dataset.labels();
    let mut train_per_class = vec![0; n_classes];
    for &i in &plan.train {
        train_per_class[labels[i]] += 1;
    }
    info!(
        "run {run}: best epoch {} of {}, test acc {:.3} auc {:.3}",
        outcome.best_epoch, outcome.epochs_run, test.acc, test.auc
    );
    Ok(RunResult {
        run,
        seed: plan.seeds.run,
        test,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.epochs_run,
        split_checksum: plan.checksum(),
        split_counts: plan.split_counts(&labels, n_classes),
        train_per_class,
        params_checksum: model.params.checksum(),
        outcome: Some(outcome),
        params: Some(model.params),
    })
}

/// `config.runs` independent runs, spread over [`worker_threads`] workers.
pub fn run_experiment(
    name: &str,
    dataset: &Dataset,
    prompts: &PromptSet,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<ExperimentReport> {
    model_config.validate()?;
    config.validate()?;
    let runs = parallel_map(config.runs, worker_threads(), |r| {
        run_once(dataset, prompts, model_config, config, r)
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport::from_runs(name, runs))
}
