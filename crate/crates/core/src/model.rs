//! The dual-scale classifier: per-scale visual aggregation, prompt
//! encoding and refinement, cosine similarity against class text features,
//! and fusion of the two scales.

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Bag;
use crate::encoders::{encode_class_prompts, PromptSet, Scale};
use crate::error::{Error, Result};
use crate::metrics::argmax;
use crate::patch_decoder::{attention_pool, decode_patches, AttentionProjectionVars, PoolingVars};
use crate::seed::rng_for;
use crate::tensor::{Tape, Tensor, Var};
use crate::text_decoder::context_attention;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    #[default]
    PrototypeDecoder,
    MeanPool,
    AttentionPool,
    SelfAttentionPool,
    Abmil,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    LogitSummation,
    FeatureSummation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    BagLevel,
    InstanceMax,
    InstanceMean,
    InstanceTopk,
}

impl Similarity {
    pub fn is_instance(self) -> bool {
        self != Similarity::BagLevel
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub n_prototypes: usize,
    /// Context vectors per scale, shared by all classes.
    pub n_context: usize,
    pub alpha_low: f64,
    pub alpha_high: f64,
    /// Cosine logits are divided by this.
    pub tau: f64,
    pub aggregator: Aggregator,
    pub fusion: Fusion,
    pub similarity: Similarity,
    /// Patches averaged by `instance_topk`; `None` means `max(1, ⌈0.1·N⌉)`.
    pub topk: Option<usize>,
    pub text_decoder: bool,
    pub text_decoder_layer_norm: bool,
    pub prototype_layers: usize,
    pub projected_attention: bool,
    pub vocab_seed: u64,
    pub encoder_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            n_prototypes: 16,
            n_context: 16,
            alpha_low: 1.0,
            alpha_high: 1.0,
            tau: 1.0,
            aggregator: Aggregator::PrototypeDecoder,
            fusion: Fusion::LogitSummation,
            similarity: Similarity::BagLevel,
            topk: None,
            text_decoder: true,
            text_decoder_layer_norm: false,
            prototype_layers: 1,
            projected_attention: false,
            vocab_seed: 0,
            encoder_seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::Config(format!("model.{field}: {msg}")));
        if self.d < 2 {
            return bad("d", "must be at least 2");
        }
        if self.n_prototypes == 0 {
            return bad("n_prototypes", "must be at least 1");
        }
        for (name, a) in [("alpha_low", self.alpha_low), ("alpha_high", self.alpha_high)] {
            if !(a.is_finite() && a >= 0.0) {
                return bad(name, "must be a finite nonnegative number");
            }
        }
        if self.alpha_sum() <= 0.0 {
            return bad("alpha_low", "alpha_low + alpha_high must be positive");
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return bad("tau", "must be positive");
        }
        if self.topk == Some(0) {
            return bad("topk", "must be at least 1");
        }
        if self.prototype_layers == 0 {
            return bad("prototype_layers", "must be at least 1");
        }
        if self.fusion == Fusion::FeatureSummation && self.similarity.is_instance() {
            return bad(
                "fusion",
                "feature_summation needs a slide feature; use similarity = bag_level",
            );
        }
        Ok(())
    }

    pub fn alpha_sum(&self) -> f64 {
        self.alpha_low + self.alpha_high
    }

    pub fn alpha(&self, scale: Scale) -> f64 {
        match scale {
            Scale::Low => self.alpha_low,
            Scale::High => self.alpha_high,
        }
    }

    /// Scales with a nonzero weight, low first.
    pub fn active_scales(&self) -> Vec<Scale> {
        Scale::BOTH.into_iter().filter(|s| self.alpha(*s) > 0.0).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

/// Trainable weights of one scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleParams {
    pub prototypes: Tensor,
    pub w_a: Tensor,
    pub w_v: Tensor,
    pub w_c: Tensor,
    pub w_b: Tensor,
    pub context: Tensor,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection: Option<Projection>,
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::new(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect()).expect("shape")
}

fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect()).expect("shape")
}

const PROTOTYPE_STD: f64 = 0.02;
const CONTEXT_STD: f64 = 0.02;

impl ScaleParams {
    pub fn init(config: &ModelConfig, scale: Scale, seed: u64) -> Self {
        let d = config.d;
        let tag = scale.name();
        let rng = |group: &str| rng_for(seed, &format!("{tag}.{group}"), 0);
        let projection = config.projected_attention.then(|| Projection {
            w_q: xavier(d, d, &mut rng("w_q")),
            w_k: xavier(d, d, &mut rng("w_k")),
            w_v: xavier(d, d, &mut rng("w_vq")),
        });
        Self {
            prototypes: gaussian(config.n_prototypes, d, PROTOTYPE_STD, &mut rng("prototypes")),
            w_a: xavier(d, d, &mut rng("w_a")),
            w_v: xavier(d, d, &mut rng("w_v")),
            w_c: xavier(d, d, &mut rng("w_c")),
            w_b: xavier(d, 1, &mut rng("w_b")),
            context: gaussian(config.n_context, d, CONTEXT_STD, &mut rng("context")),
            projection,
        }
    }

    fn groups(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = vec![
            ("prototypes", &self.prototypes),
            ("w_a", &self.w_a),
            ("w_v", &self.w_v),
            ("w_c", &self.w_c),
            ("w_b", &self.w_b),
            ("context", &self.context),
        ];
        if let Some(p) = &self.projection {
            v.extend([("w_q", &p.w_q), ("w_k", &p.w_k), ("w_vq", &p.w_v)]);
        }
        v
    }

    fn groups_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.prototypes,
            &mut self.w_a,
            &mut self.w_v,
            &mut self.w_c,
            &mut self.w_b,
            &mut self.context,
        ];
        if let Some(p) = &mut self.projection {
            v.extend([&mut p.w_q, &mut p.w_k, &mut p.w_v]);
        }
        v
    }

    /// Weights of the patch decoder alone: prototypes and pooling.
    pub fn decoder_parameter_count(&self) -> usize {
        self.prototypes.len() + self.w_a.len() + self.w_v.len() + self.w_c.len() + self.w_b.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub low: ScaleParams,
    pub high: ScaleParams,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        Self {
            low: ScaleParams::init(config, Scale::Low, seed),
            high: ScaleParams::init(config, Scale::High, seed),
        }
    }

    pub fn scale(&self, scale: Scale) -> &ScaleParams {
        match scale {
            Scale::Low => &self.low,
            Scale::High => &self.high,
        }
    }

    /// Parameter groups as `(name, tensor)` in a fixed order, e.g.
    /// `("low.w_a", ..)`.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for scale in Scale::BOTH {
            for (g, t) in self.scale(scale).groups() {
                out.push((format!("{}.{g}", scale.name()), t));
            }
        }
        out
    }

    /// Mutable access in the order of [`Self::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.low.groups_mut();
        v.extend(self.high.groups_mut());
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// FNV-1a over every parameter's bytes in group order.
    pub fn checksum(&self) -> u64 {
        let bytes: Vec<u8> = self
            .named()
            .iter()
            .flat_map(|(_, t)| t.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect();
        crate::seed::fnv1a(&bytes)
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }
}

/// Tape handles for one scale's parameters.
#[derive(Debug, Clone, Copy)]
pub struct BoundScale {
    pub prototypes: Var,
    pub pool: PoolingVars,
    pub context: Var,
    pub projection: Option<AttentionProjectionVars>,
}

/// Every parameter group placed on a tape, in [`ModelParams::named`] order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub low: BoundScale,
    pub high: BoundScale,
    pub vars: Vec<Var>,
}

impl BoundParams {
    pub fn scale(&self, scale: Scale) -> &BoundScale {
        match scale {
            Scale::Low => &self.low,
            Scale::High => &self.high,
        }
    }

    /// Gradient of every group (zeros where the loss does not depend on it).
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars.iter().map(|v| tape.grad_or_zeros(*v)).collect()
    }
}

/// Tape handles produced by one scale of a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ScaleVars {
    pub scale: Scale,
    pub patches: Var,
    /// `1 × d`
    pub slide: Var,
    /// `C × d` text features before refinement.
    pub text: Var,
    /// `C × d` refined text features.
    pub refined: Var,
    pub weights: Option<Var>,
    pub raw_attention: Option<Var>,
    /// `1 × C` similarities divided by τ. Absent under feature summation.
    pub logits: Option<Var>,
    pub probs: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub scales: Vec<ScaleVars>,
    /// Present under feature summation.
    pub fused_logits: Option<Var>,
    /// `1 × C`, sums to `α_l + α_h`.
    pub fused: Var,
    pub alpha_sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleDiagnostics {
    pub scale: Scale,
    pub slide: Vec<f64>,
    pub refined: Tensor,
    pub weights: Option<Vec<f64>>,
    pub raw_attention: Option<Tensor>,
    pub logits: Option<Vec<f64>>,
    pub probs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForwardDiagnostics {
    pub scales: Vec<ScaleDiagnostics>,
    /// Unnormalized fused probabilities.
    pub fused: Vec<f64>,
    pub alpha_sum: f64,
}

impl ForwardDiagnostics {
    pub fn scale(&self, scale: Scale) -> Option<&ScaleDiagnostics> {
        self.scales.iter().find(|s| s.scale == scale)
    }

    /// Fused probabilities divided by `α_l + α_h`.
    pub fn normalized(&self) -> Vec<f64> {
        self.fused.iter().map(|p| p / self.alpha_sum).collect()
    }

    pub fn prediction(&self) -> usize {
        predict(&self.fused)
    }
}

impl ForwardVars {
    pub fn read(&self, tape: &Tape) -> ForwardDiagnostics {
        let scales = self
            .scales
            .iter()
            .map(|s| ScaleDiagnostics {
                scale: s.scale,
                slide: tape.value(s.slide).data().to_vec(),
                refined: tape.value(s.refined).clone(),
                weights: s.weights.map(|w| tape.value(w).data().to_vec()),
                raw_attention: s.raw_attention.map(|r| tape.value(r).clone()),
                logits: s.logits.map(|l| tape.value(l).data().to_vec()),
                probs: s.probs.map(|p| tape.value(p).data().to_vec()),
            })
            .collect();
        ForwardDiagnostics {
            scales,
            fused: tape.value(self.fused).data().to_vec(),
            alpha_sum: self.alpha_sum,
        }
    }
}

/// Highest-probability class; ties go to the lowest index.
pub fn predict(p: &[f64]) -> usize {
    argmax(p)
}

/// `max(1, ⌈0.1·N⌉)`.
pub fn default_topk(n: usize) -> usize {
    n.div_ceil(10).max(1)
}

/// Slide feature from patch rows for the non-prototype aggregators.
pub fn baseline_aggregate(tape: &mut Tape, patches: Var, mode: Aggregator, pool: &PoolingVars) -> Result<Var> {
    match mode {
        Aggregator::MeanPool => Ok(tape.mean_rows(patches)?),
        Aggregator::AttentionPool | Aggregator::Abmil => Ok(attention_pool(tape, patches, pool)?.0),
        Aggregator::SelfAttentionPool => {
            let d = tape.shape(patches).1;
            let pt = tape.transpose(patches);
            let logits = tape.matmul(patches, pt)?;
            let scaled = tape.scale(logits, 1.0 / (d as f64).sqrt());
            let attn = tape.softmax_rows(scaled)?;
            let mixed = tape.matmul(attn, patches)?;
            Ok(tape.mean_rows(mixed)?)
        }
        Aggregator::PrototypeDecoder => Err(Error::Config(
            "baseline_aggregate: prototype_decoder is not a baseline".into(),
        )),
    }
}

/// `P̂ = P/(α_l+α_h)` followed by cross-entropy against `label`.
pub fn normalize_and_loss(tape: &mut Tape, fused: Var, alpha_sum: f64, label: usize) -> Result<Var> {
    let c = tape.shape(fused).1;
    if label >= c {
        return Err(Error::Config(format!("label {label} out of range for {c} classes")));
    }
    let normalized = tape.scale(fused, 1.0 / alpha_sum);
    Ok(tape.cross_entropy(normalized, label)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, seed);
        Ok(Self { config, params })
    }

    /// Same parameters, with the other scale's weight set to zero.
    pub fn single_scale(&self, scale: Scale) -> Self {
        let mut m = self.clone();
        match scale {
            Scale::Low => m.config.alpha_high = 0.0,
            Scale::High => m.config.alpha_low = 0.0,
        }
        m
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut vars = Vec::new();
        let mut bind_scale = |p: &ScaleParams| {
            let mut param = |t: &Tensor| {
                let v = tape.param(t.clone());
                vars.push(v);
                v
            };
            let prototypes = param(&p.prototypes);
            let pool = PoolingVars {
                w_a: param(&p.w_a),
                w_v: param(&p.w_v),
                w_c: param(&p.w_c),
                w_b: param(&p.w_b),
            };
            let context = param(&p.context);
            let projection = p.projection.as_ref().map(|q| AttentionProjectionVars {
                w_q: param(&q.w_q),
                w_k: param(&q.w_k),
                w_v: param(&q.w_v),
            });
            BoundScale {
                prototypes,
                pool,
                context,
                projection,
            }
        };
        let low = bind_scale(&self.params.low);
        let high = bind_scale(&self.params.high);
        BoundParams { low, high, vars }
    }

    fn check_inputs(&self, bag: &Bag, prompts: &PromptSet) -> Result<()> {
        let d = self.config.d;
        if prompts.d() != d {
            return Err(Error::Config(format!("prompt set has d = {}, model has d = {d}", prompts.d())));
        }
        for scale in self.config.active_scales() {
            let h = bag_scale(bag, scale);
            if h.cols() != d {
                return Err(Error::Config(format!(
                    "bag {}: {} features have d = {}, model has d = {d}",
                    bag.id,
                    scale.name(),
                    h.cols()
                )));
            }
            if h.rows() == 0 {
                return Err(Error::Config(format!("bag {}: no {} patches", bag.id, scale.name())));
            }
        }
        Ok(())
    }

    fn record_scale(
        &self,
        tape: &mut Tape,
        bound: &BoundScale,
        prompts: &PromptSet,
        bag: &Bag,
        scale: Scale,
    ) -> Result<ScaleVars> {
        let cfg = &self.config;
        let h = bag_scale(bag, scale);
        let patches = tape.constant(h.clone());
        let text = encode_class_prompts(tape, prompts, scale, bound.context)?;
        let (slide, updated, weights, raw_attention) = match cfg.aggregator {
            Aggregator::PrototypeDecoder => {
                let out = decode_patches(
                    tape,
                    bound.prototypes,
                    patches,
                    &bound.pool,
                    cfg.prototype_layers,
                    bound.projection.as_ref(),
                )?;
                (out.slide, Some(out.updated), Some(out.weights), Some(out.raw_attention))
            }
            mode => (baseline_aggregate(tape, patches, mode, &bound.pool)?, None, None, None),
        };
        let refined = if cfg.text_decoder {
            let protos = match updated {
                Some(u) => u,
                None => tape.constant(Tensor::zeros(0, cfg.d)),
            };
            context_attention(tape, text, protos, patches, cfg.text_decoder_layer_norm)?
        } else {
            text
        };
        let (logits, probs) = if cfg.fusion == Fusion::FeatureSummation {
            (None, None)
        } else {
            let logits = self.similarity_logits(tape, slide, patches, refined, h.rows())?;
            let probs = tape.softmax_rows(logits)?;
            (Some(logits), Some(probs))
        };
        Ok(ScaleVars {
            scale,
            patches,
            slide,
            text,
            refined,
            weights,
            raw_attention,
            logits,
            probs,
        })
    }

    fn similarity_logits(&self, tape: &mut Tape, slide: Var, patches: Var, refined: Var, n: usize) -> Result<Var> {
        let inv_tau = 1.0 / self.config.tau;
        let sim = match self.config.similarity {
            Similarity::BagLevel => tape.cosine_matrix(slide, refined)?,
            mode => {
                let per_patch = tape.cosine_matrix(patches, refined)?;
                match mode {
                    Similarity::InstanceMax => tape.max_rows(per_patch)?,
                    Similarity::InstanceMean => tape.mean_rows(per_patch)?,
                    _ => {
                        let mut k = self.config.topk.unwrap_or_else(|| default_topk(n));
                        if k > n {
                            warn!("instance_topk: k = {k} exceeds {n} patches, using {n}");
                            k = n;
                        }
                        tape.topk_mean_rows(per_patch, k)?
                    }
                }
            }
        };
        Ok(tape.scale(sim, inv_tau))
    }

    /// Records the full forward pass on `tape` using already bound
    /// parameters.
    pub fn record(&self, tape: &mut Tape, bound: &BoundParams, prompts: &PromptSet, bag: &Bag) -> Result<ForwardVars> {
        self.check_inputs(bag, prompts)?;
        let cfg = &self.config;
        let mut scales = Vec::new();
        for scale in cfg.active_scales() {
            scales.push(self.record_scale(tape, bound.scale(scale), prompts, bag, scale)?);
        }
        let weighted = |tape: &mut Tape, pick: &dyn Fn(&ScaleVars) -> Var| -> Result<Var> {
            let mut acc: Option<Var> = None;
            for s in &scales {
                let term = tape.scale(pick(s), cfg.alpha(s.scale));
                acc = Some(match acc {
                    None => term,
                    Some(a) => tape.add(a, term)?,
                });
            }
            acc.ok_or_else(|| Error::Config("no active scale".into()))
        };
        let (fused, fused_logits) = match cfg.fusion {
            Fusion::LogitSummation => (weighted(tape, &|s| s.probs.expect("per-scale probabilities"))?, None),
            Fusion::FeatureSummation => {
                let slide = weighted(tape, &|s| s.slide)?;
                let refined = weighted(tape, &|s| s.refined)?;
                let sim = tape.cosine_matrix(slide, refined)?;
                let logits = tape.scale(sim, 1.0 / cfg.tau);
                let probs = tape.softmax_rows(logits)?;
                (tape.scale(probs, cfg.alpha_sum()), Some(logits))
            }
        };
        Ok(ForwardVars {
            scales,
            fused_logits,
            fused,
            alpha_sum: cfg.alpha_sum(),
        })
    }

    pub fn forward(&self, prompts: &PromptSet, bag: &Bag) -> Result<ForwardDiagnostics> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        Ok(self.record(&mut tape, &bound, prompts, bag)?.read(&tape))
    }

    pub fn single_scale_forward(&self, prompts: &PromptSet, bag: &Bag, scale: Scale) -> Result<ForwardDiagnostics> {
        self.single_scale(scale).forward(prompts, bag)
    }

    /// Loss on one labelled bag plus the gradient of every parameter group
    /// in [`ModelParams::named`] order.
    pub fn loss_and_grads(&self, prompts: &PromptSet, bag: &Bag) -> Result<(f64, ForwardDiagnostics, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let fwd = self.record(&mut tape, &bound, prompts, bag)?;
        let loss = normalize_and_loss(&mut tape, fwd.fused, fwd.alpha_sum, bag.label)?;
        tape.backward(loss)?;
        Ok((tape.value(loss).item(), fwd.read(&tape), bound.grads(&tape)))
    }

    pub fn loss(&self, prompts: &PromptSet, bag: &Bag) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let fwd = self.record(&mut tape, &bound, prompts, bag)?;
        let loss = normalize_and_loss(&mut tape, fwd.fused, fwd.alpha_sum, bag.label)?;
        Ok(tape.value(loss).item())
    }

    /// Prototype assignment of every high-scale patch.
    pub fn explain(&self, prompts: &PromptSet, bag: &Bag) -> Result<Explanation> {
        if self.config.aggregator != Aggregator::PrototypeDecoder {
            return Err(Error::Config(
                "explain: needs aggregator = prototype_decoder".into(),
            ));
        }
        let mut model = self.clone();
        if model.config.alpha_high == 0.0 {
            model.config.alpha_high = 1.0;
        }
        let diag = model.forward(prompts, bag)?;
        let high = diag.scale(Scale::High).expect("high scale is active");
        let raw = high.raw_attention.as_ref().expect("prototype decoder keeps raw attention");
        let weights = high.weights.as_ref().expect("prototype decoder keeps weights");
        Ok(assign_patches(&bag.id, raw, weights))
    }
}

fn bag_scale(bag: &Bag, scale: Scale) -> &Tensor {
    match scale {
        Scale::Low => &bag.low,
        Scale::High => &bag.high,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub patch: usize,
    pub prototype: usize,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Explanation {
    pub bag_id: String,
    pub scale: String,
    pub assignments: Vec<Assignment>,
    pub representative_prototype: usize,
}

/// Assigns patch `j` to `argmax_p raw[p, j]` and flags the patches that went
/// to the prototype with the largest pooling weight.
pub fn assign_patches(bag_id: &str, raw_attention: &Tensor, weights: &[f64]) -> Explanation {
    let representative = argmax(weights);
    let (n_p, n) = raw_attention.shape();
    let assignments = (0..n)
        .map(|j| {
            let column: Vec<f64> = (0..n_p).map(|p| raw_attention.get(p, j)).collect();
            let prototype = argmax(&column);
            Assignment {
                patch: j,
                prototype,
                flagged: prototype == representative,
            }
        })
        .collect();
    Explanation {
        bag_id: bag_id.to_string(),
        scale: Scale::High.name().to_string(),
        assignments,
        representative_prototype: representative,
    }
}
