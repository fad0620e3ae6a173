//! Prototype-guided patch decoder.
//!
//! Learnable prototypes query the patch features through one cross-attention
//! layer (queries = prototypes, keys = values = patches), the result is layer
//! normalized and added back to the prototypes, and the updated prototypes
//! are fused into a single slide feature with gated attention pooling:
//!
//! ```text
//! Pr_u = LayerNorm(softmax(Pr·Hᵀ/√d)·H) + Pr
//! Pr'_i = W_a·Pr_u,i
//! A_i   = softmax_i(W_bᵀ·tanh(W_v·Pr'_i))
//! S     = W_c·Σ_i A_i·Pr'_i
//! ```

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var, LAYER_NORM_EPS};

/// Tape handles for the attention-pooling weights of one scale.
#[derive(Debug, Clone, Copy)]
pub struct PoolingVars {
    /// `d × d`
    pub w_a: Var,
    /// `d × d`
    pub w_v: Var,
    /// `d × d`
    pub w_c: Var,
    /// `d × 1`
    pub w_b: Var,
}

/// Optional learned query/key/value projections for the prototype
/// attention. Off by default.
#[derive(Debug, Clone, Copy)]
pub struct AttentionProjectionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderVars {
    /// `N_p × d` updated prototypes.
    pub updated: Var,
    /// `N_p × N` cross-attention logits before the softmax.
    pub raw_attention: Var,
    /// `1 × N_p` prototype weights.
    pub weights: Var,
    /// `1 × d` slide feature.
    pub slide: Var,
}

/// Plain-value copy of a decoder pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput {
    pub updated: Tensor,
    pub raw_attention: Tensor,
    pub weights: Vec<f64>,
    pub slide: Tensor,
}

impl DecoderVars {
    pub fn read(&self, tape: &Tape) -> DecoderOutput {
        DecoderOutput {
            updated: tape.value(self.updated).clone(),
            raw_attention: tape.value(self.raw_attention).clone(),
            weights: tape.value(self.weights).data().to_vec(),
            slide: tape.value(self.slide).clone(),
        }
    }
}

/// `x·Wᵀ`, i.e. `W` applied to every row of `x`.
pub(crate) fn apply_rows(tape: &mut Tape, x: Var, w: Var) -> Result<Var> {
    let wt = tape.transpose(w);
    Ok(tape.matmul(x, wt)?)
}

/// One prototype-guided attention layer. Returns the updated prototypes and
/// the pre-softmax attention logits.
pub fn prototype_attention(
    tape: &mut Tape,
    prototypes: Var,
    patches: Var,
    projection: Option<&AttentionProjectionVars>,
) -> Result<(Var, Var)> {
    let (n, d) = tape.shape(patches);
    if n == 0 {
        return Err(Error::Config("prototype_attention: bag has no patches".into()));
    }
    let (_, dp) = tape.shape(prototypes);
    if dp != d {
        return Err(Error::Config(format!(
            "prototype_attention: prototypes have d = {dp}, patches have d = {d}"
        )));
    }
    let (query, key, value) = match projection {
        None => (prototypes, patches, patches),
        Some(p) => (
            apply_rows(tape, prototypes, p.w_q)?,
            apply_rows(tape, patches, p.w_k)?,
            apply_rows(tape, patches, p.w_v)?,
        ),
    };
    let key_t = tape.transpose(key);
    let logits = tape.matmul(query, key_t)?;
    let raw = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let attn = tape.softmax_rows(raw)?;
    let mixed = tape.matmul(attn, value)?;
    let normed = tape.layer_norm_rows(mixed, LAYER_NORM_EPS)?;
    let updated = tape.add(normed, prototypes)?;
    Ok((updated, raw))
}

/// Gated attention pooling over the rows of `rows` (`K × d`). Returns the
/// `1 × d` pooled feature and the `1 × K` attention weights.
pub fn attention_pool(tape: &mut Tape, rows: Var, pool: &PoolingVars) -> Result<(Var, Var)> {
    let projected = apply_rows(tape, rows, pool.w_a)?;
    let hidden = apply_rows(tape, projected, pool.w_v)?;
    let gate = tape.tanh(hidden);
    let scores = tape.matmul(gate, pool.w_b)?;
    let scores_row = tape.transpose(scores);
    let weights = tape.softmax_rows(scores_row)?;
    let fused = tape.matmul(weights, projected)?;
    let slide = apply_rows(tape, fused, pool.w_c)?;
    Ok((slide, weights))
}

/// Prototype attention (`layers` times, sharing the identity projections)
/// followed by attention pooling of the updated prototypes.
pub fn decode_patches(
    tape: &mut Tape,
    prototypes: Var,
    patches: Var,
    pool: &PoolingVars,
    layers: usize,
    projection: Option<&AttentionProjectionVars>,
) -> Result<DecoderVars> {
    if layers == 0 {
        return Err(Error::Config("decode_patches: need at least one attention layer".into()));
    }
    let (mut updated, mut raw) = prototype_attention(tape, prototypes, patches, projection)?;
    for _ in 1..layers {
        (updated, raw) = prototype_attention(tape, updated, patches, projection)?;
    }
    let (slide, weights) = attention_pool(tape, updated, pool)?;
    Ok(DecoderVars {
        updated,
        raw_attention: raw,
        weights,
        slide,
    })
}
