//! Frozen text side: description embeddings, the frozen encoder stub, and
//! prompt assembly with learnable context vectors.
//!
//! The encoder is `mean over tokens -> fixed linear map -> layer norm`. It is
//! differentiable with respect to its input sequence, so gradients reach the
//! context vectors, but its projection is never trained. Mean pooling makes
//! it insensitive to token order, unlike a real sequence encoder.

use std::collections::BTreeMap;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tensor::{Tape, Tensor, Var, LAYER_NORM_EPS};

const RENAL_ASSET: &str = include_str!("../assets/renal.json");
const LUNG_ASSET: &str = include_str!("../assets/lung.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Low,
    High,
}

impl Scale {
    pub const BOTH: [Scale; 2] = [Scale::Low, Scale::High];

    pub fn name(self) -> &'static str {
        match self {
            Scale::Low => "low",
            Scale::High => "high",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleDescriptions {
    pub low: Vec<String>,
    pub high: Vec<String>,
}

impl ScaleDescriptions {
    pub fn get(&self, scale: Scale) -> &[String] {
        match scale {
            Scale::Low => &self.low,
            Scale::High => &self.high,
        }
    }
}

/// Per-class, per-scale descriptive sentences, keyed by class name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DescriptionConfig {
    pub classes: BTreeMap<String, ScaleDescriptions>,
}

impl DescriptionConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Shipped renal cell carcinoma prompts (CCRCC, PRCC, CRCC).
    pub fn renal() -> Self {
        Self::from_json(RENAL_ASSET).expect("bundled renal asset")
    }

    /// Shipped lung cancer prompts (LUAD, LUSC).
    pub fn lung() -> Self {
        Self::from_json(LUNG_ASSET).expect("bundled lung asset")
    }

    /// One generic sentence per class and scale built from the class name.
    pub fn class_name_template(class_names: &[String]) -> Self {
        let classes = class_names
            .iter()
            .map(|name| {
                (
                    name.clone(),
                    ScaleDescriptions {
                        low: vec![format!("A low magnification whole slide image of {name}.")],
                        high: vec![format!("A high magnification whole slide image of {name}.")],
                    },
                )
            })
            .collect();
        Self { classes }
    }

    /// Picks a bundled asset covering every class name, falling back to the
    /// class-name template.
    pub fn for_classes(class_names: &[String]) -> Self {
        for asset in [Self::renal(), Self::lung()] {
            if class_names.iter().all(|n| asset.classes.contains_key(n)) {
                return asset;
            }
        }
        Self::class_name_template(class_names)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config("descriptions: no classes".into()));
        }
        for (name, desc) in &self.classes {
            for scale in Scale::BOTH {
                let sentences = desc.get(scale);
                if sentences.is_empty() || sentences.iter().all(|s| tokenize(s).is_empty()) {
                    return Err(Error::Config(format!(
                        "descriptions: class {name} has no {} text",
                        scale.name()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Sentences for the given classes, in the given order.
    pub fn ordered(&self, class_names: &[String]) -> Result<Vec<&ScaleDescriptions>> {
        class_names
            .iter()
            .map(|n| {
                self.classes
                    .get(n)
                    .ok_or_else(|| Error::Config(format!("descriptions: no entry for class {n}")))
            })
            .collect()
    }
}

/// Lower-cased alphanumeric runs; everything else separates tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Embedding row of one token: `d` standard-normal draws from a stream
/// seeded by the vocabulary seed and the token's FNV-1a hash.
pub fn token_embedding(token: &str, vocab_seed: u64, d: usize) -> Vec<f64> {
    let mut rng = rng_for(vocab_seed, token, 0);
    (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Frozen token embeddings (`L × d`) of all sentences, concatenated in order.
pub fn embed_description(sentences: &[String], vocab_seed: u64, d: usize) -> Result<Tensor> {
    let tokens: Vec<String> = sentences.iter().flat_map(|s| tokenize(s)).collect();
    if tokens.is_empty() {
        return Err(Error::Config("description text is empty".into()));
    }
    let mut data = Vec::with_capacity(tokens.len() * d);
    for t in &tokens {
        data.extend(token_embedding(t, vocab_seed, d));
    }
    Ok(Tensor::new(tokens.len(), d, data)?)
}

/// Stand-in for a pretrained text encoder: a `d × d` Gaussian projection
/// drawn once from `seed` and never updated.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenTextEncoder {
    projection: Tensor,
    seed: u64,
}

impl FrozenTextEncoder {
    pub fn new(d: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, "text-encoder", 0);
        let scale = 1.0 / (d as f64).sqrt();
        let data = (0..d * d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Self {
            projection: Tensor::new(d, d, data).expect("square projection"),
            seed,
        }
    }

    pub fn projection(&self) -> &Tensor {
        &self.projection
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn d(&self) -> usize {
        self.projection.rows()
    }

    /// FNV-1a over the projection's bytes; stable while the weights are.
    pub fn checksum(&self) -> u64 {
        let bytes: Vec<u8> = self.projection.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        crate::seed::fnv1a(&bytes)
    }

    /// Records `LayerNorm(mean_rows(sequence) · P)` on the tape. `projection`
    /// must be the constant node returned by [`Self::record`].
    pub fn encode_text(&self, tape: &mut Tape, sequence: Var, projection: Var) -> Result<Var> {
        if tape.shape(sequence).0 == 0 {
            return Err(Error::Config("encode_text: empty token sequence".into()));
        }
        let pooled = tape.mean_rows(sequence)?;
        let projected = tape.matmul(pooled, projection)?;
        Ok(tape.layer_norm_rows(projected, LAYER_NORM_EPS)?)
    }

    /// Places the projection on the tape as a constant.
    pub fn record(&self, tape: &mut Tape) -> Var {
        tape.constant(self.projection.clone())
    }
}

/// Frozen description embeddings for every class at both scales, plus the
/// encoder that turns prompts into class text features.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub class_names: Vec<String>,
    pub low: Vec<Tensor>,
    pub high: Vec<Tensor>,
    pub encoder: FrozenTextEncoder,
}

impl PromptSet {
    pub fn build(
        class_names: &[String],
        descriptions: &DescriptionConfig,
        d: usize,
        vocab_seed: u64,
        encoder_seed: u64,
    ) -> Result<Self> {
        let ordered = descriptions.ordered(class_names)?;
        let embed = |scale: Scale| -> Result<Vec<Tensor>> {
            ordered
                .iter()
                .map(|desc| embed_description(desc.get(scale), vocab_seed, d))
                .collect()
        };
        Ok(Self {
            class_names: class_names.to_vec(),
            low: embed(Scale::Low)?,
            high: embed(Scale::High)?,
            encoder: FrozenTextEncoder::new(d, encoder_seed),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn d(&self) -> usize {
        self.encoder.d()
    }

    pub fn descriptions(&self, scale: Scale) -> &[Tensor] {
        match scale {
            Scale::Low => &self.low,
            Scale::High => &self.high,
        }
    }
}

/// Context vectors (`M × d`) followed by description embeddings (`L × d`).
pub fn assemble_prompt(tape: &mut Tape, context: Var, description: Var) -> Result<Var> {
    let (m, dc) = tape.shape(context);
    let (_, dd) = tape.shape(description);
    if dc != dd {
        return Err(Error::Config(format!(
            "assemble_prompt: context vectors have d = {dc}, description has d = {dd}"
        )));
    }
    if m == 0 {
        return Ok(description);
    }
    Ok(tape.concat_rows(context, description)?)
}

/// Encodes every class prompt of one scale into a `C × d` matrix of text
/// features. `context` is the scale's `M × d` context node (possibly with
/// zero rows).
pub fn encode_class_prompts(tape: &mut Tape, prompts: &PromptSet, scale: Scale, context: Var) -> Result<Var> {
    let projection = prompts.encoder.record(tape);
    let mut rows: Option<Var> = None;
    for desc in prompts.descriptions(scale) {
        let e = tape.constant(desc.clone());
        let seq = assemble_prompt(tape, context, e)?;
        let feat = prompts.encoder.encode_text(tape, seq, projection)?;
        rows = Some(match rows {
            None => feat,
            Some(acc) => tape.concat_rows(acc, feat)?,
        });
    }
    rows.ok_or_else(|| Error::Config("encode_class_prompts: no classes".into()))
}
