//! Context-guided text decoder: class text features attend over the
//! concatenation of updated prototypes and patch features, and the result is
//! added back to the text features.
//!
//! `D' = softmax(D·Kᵀ/√d)·K + D` with `K = [Pr_u; H]`.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var, LAYER_NORM_EPS};

/// Refines `text` (`C × d`) with visual context. `layer_norm` adds a norm on
/// the attention output before the residual; the default model leaves it off.
pub fn context_attention(tape: &mut Tape, text: Var, prototypes: Var, patches: Var, layer_norm: bool) -> Result<Var> {
    let (n_p, dp) = tape.shape(prototypes);
    let (n, dh) = tape.shape(patches);
    let (_, dt) = tape.shape(text);
    if n_p + n == 0 {
        return Err(Error::Config("context_attention: empty visual context".into()));
    }
    if dp != dt || dh != dt {
        return Err(Error::Config(format!(
            "context_attention: dimension mismatch (text {dt}, prototypes {dp}, patches {dh})"
        )));
    }
    let context = match (n_p, n) {
        (0, _) => patches,
        (_, 0) => prototypes,
        _ => tape.concat_rows(prototypes, patches)?,
    };
    let context_t = tape.transpose(context);
    let logits = tape.matmul(text, context_t)?;
    let scaled = tape.scale(logits, 1.0 / (dt as f64).sqrt());
    let attn = tape.softmax_rows(scaled)?;
    let mut mixed = tape.matmul(attn, context)?;
    if layer_norm {
        mixed = tape.layer_norm_rows(mixed, LAYER_NORM_EPS)?;
    }
    Ok(tape.add(mixed, text)?)
}
