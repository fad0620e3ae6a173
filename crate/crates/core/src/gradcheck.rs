//! Central finite-difference checks of the tape's backward rules and of the
//! full model's parameter gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::Bag;
use crate::encoders::{DescriptionConfig, PromptSet};
use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::tensor::{Tape, Tensor, Var, LAYER_NORM_EPS};

pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    /// `‖g_analytic − g_numeric‖ / max(‖g_analytic‖, ‖g_numeric‖)`.
    pub relative_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub tolerance: f64,
    pub ops: Vec<Check>,
    pub parameters: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.ops.iter().chain(&self.parameters).all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.ops.iter().chain(&self.parameters).filter(|c| !c.passed).collect()
    }
}

/// Norm-wise relative error between two gradients of the same shape.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < NORM_FLOOR {
        return norm(&diff);
    }
    norm(&diff) / scale
}

fn check(name: impl Into<String>, analytic: &[f64], numeric: &[f64]) -> Check {
    let relative_error = relative_error(analytic, numeric);
    Check {
        name: name.into(),
        relative_error,
        passed: relative_error <= TOLERANCE,
    }
}

type Build = fn(&mut Tape, &[Var]) -> Result<Var>;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(-1.5..1.5)).collect()).expect("shape")
}

fn op_cases() -> Vec<(&'static str, Vec<(usize, usize)>, Build)> {
    vec![
        ("matmul", vec![(3, 4), (4, 2)], |t, v| Ok(t.matmul(v[0], v[1])?)),
        ("transpose", vec![(3, 2)], |t, v| Ok(t.transpose(v[0]))),
        ("add", vec![(2, 3), (2, 3)], |t, v| Ok(t.add(v[0], v[1])?)),
        ("mul_elem", vec![(2, 3), (2, 3)], |t, v| Ok(t.mul_elem(v[0], v[1])?)),
        ("scale", vec![(2, 3)], |t, v| Ok(t.scale(v[0], -1.7))),
        ("tanh", vec![(3, 3)], |t, v| Ok(t.tanh(v[0]))),
        ("softmax_rows", vec![(2, 4)], |t, v| Ok(t.softmax_rows(v[0])?)),
        ("layer_norm_rows", vec![(2, 5)], |t, v| Ok(t.layer_norm_rows(v[0], LAYER_NORM_EPS)?)),
        ("concat_rows", vec![(1, 3), (2, 3)], |t, v| Ok(t.concat_rows(v[0], v[1])?)),
        ("mean_rows", vec![(4, 3)], |t, v| Ok(t.mean_rows(v[0])?)),
        ("sum_all", vec![(2, 3)], |t, v| Ok(t.sum_all(v[0]))),
        ("cosine_matrix", vec![(3, 4), (2, 4)], |t, v| Ok(t.cosine_matrix(v[0], v[1])?)),
        ("max_rows", vec![(4, 3)], |t, v| Ok(t.max_rows(v[0])?)),
        ("topk_mean_rows", vec![(5, 3)], |t, v| Ok(t.topk_mean_rows(v[0], 2)?)),
        ("cross_entropy", vec![(1, 4)], |t, v| {
            let p = t.softmax_rows(v[0])?;
            Ok(t.cross_entropy(p, 2)?)
        }),
    ]
}

/// Scalar probe `Σ out ⊙ W` for a fixed random `W`.
fn probe(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul_elem(out, w)?;
    Ok(tape.sum_all(prod))
}

/// Every differentiable tape op against finite differences. `sign_flip`
/// corrupts one op's backward rule (mutation testing only).
fn op_suite_inner(seed: u64, sign_flip: Option<&'static str>) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, shapes, build) in op_cases() {
        let inputs: Vec<Tensor> = shapes.iter().map(|&(r, c)| random(&mut rng, r, c)).collect();
        let out_shape = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
            let o = build(&mut tape, &vars)?;
            tape.shape(o)
        };
        let weights = random(&mut rng, out_shape.0, out_shape.1);
        let eval = |inp: &[Tensor], grads: bool| -> Result<(f64, Vec<Tensor>)> {
            let mut tape = Tape::new();
            #[cfg(any(test, feature = "fault-injection"))]
            if let Some(op) = sign_flip {
                tape.inject_sign_flip(op);
            }
            let vars: Vec<Var> = inp.iter().map(|t| tape.param(t.clone())).collect();
            let o = build(&mut tape, &vars)?;
            let l = probe(&mut tape, o, &weights)?;
            if grads {
                tape.backward(l)?;
            }
            Ok((tape.value(l).item(), vars.iter().map(|v| tape.grad_or_zeros(*v)).collect()))
        };
        let (_, analytic) = eval(&inputs, true)?;
        let mut a_all = Vec::new();
        let mut n_all = Vec::new();
        for (k, input) in inputs.iter().enumerate() {
            for e in 0..input.len() {
                let mut plus = inputs.clone();
                let mut minus = inputs.clone();
                plus[k].data_mut()[e] += STEP;
                minus[k].data_mut()[e] -= STEP;
                n_all.push((eval(&plus, false)?.0 - eval(&minus, false)?.0) / (2.0 * STEP));
            }
            a_all.extend_from_slice(analytic[k].data());
        }
        out.push(check(name, &a_all, &n_all));
    }
    #[cfg(not(any(test, feature = "fault-injection")))]
    let _ = sign_flip;
    Ok(out)
}

pub fn op_suite(seed: u64) -> Result<Vec<Check>> {
    op_suite_inner(seed, None)
}

/// Model, prompts and one labelled bag at the tiny configuration: `d = 8`,
/// two prototypes, two classes, two context vectors, five patches per scale.
pub fn tiny_setup(seed: u64) -> Result<(Model, PromptSet, Bag)> {
    let config = ModelConfig {
        d: 8,
        n_prototypes: 2,
        n_context: 2,
        tau: 0.1,
        ..ModelConfig::default()
    };
    let names: Vec<String> = vec!["class_0".into(), "class_1".into()];
    let prompts = PromptSet::build(
        &names,
        &DescriptionConfig::class_name_template(&names),
        config.d,
        config.vocab_seed,
        config.encoder_seed,
    )?;
    let model = Model::new(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let low = random(&mut rng, 5, 8);
    let high = random(&mut rng, 5, 8);
    let bag = Bag::new("gradcheck".to_string(), 1, low, high)?;
    Ok((model, prompts, bag))
}

/// Loss gradient of every parameter group against finite differences.
pub fn parameter_suite(model: &Model, prompts: &PromptSet, bag: &Bag) -> Result<Vec<Check>> {
    parameter_suite_inner(model, prompts, bag, None)
}

fn parameter_suite_inner(
    model: &Model,
    prompts: &PromptSet,
    bag: &Bag,
    sign_flip: Option<&'static str>,
) -> Result<Vec<Check>> {
    let loss_of = |m: &Model, grads: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        #[cfg(any(test, feature = "fault-injection"))]
        if let Some(op) = sign_flip {
            tape.inject_sign_flip(op);
        }
        let bound = m.bind(&mut tape);
        let fwd = m.record(&mut tape, &bound, prompts, bag)?;
        let loss = crate::model::normalize_and_loss(&mut tape, fwd.fused, fwd.alpha_sum, bag.label)?;
        if grads {
            tape.backward(loss)?;
        }
        Ok((tape.value(loss).item(), bound.grads(&tape)))
    };
    #[cfg(not(any(test, feature = "fault-injection")))]
    let _ = sign_flip;
    let (_, analytic) = loss_of(model, true)?;
    let names: Vec<String> = model.params.named().into_iter().map(|(n, _)| n).collect();
    let mut out = Vec::new();
    for (g, name) in names.iter().enumerate() {
        let len = analytic[g].len();
        let mut numeric = Vec::with_capacity(len);
        for e in 0..len {
            let mut plus = model.clone();
            plus.params.tensors_mut()[g].data_mut()[e] += STEP;
            let mut minus = model.clone();
            minus.params.tensors_mut()[g].data_mut()[e] -= STEP;
            numeric.push((loss_of(&plus, false)?.0 - loss_of(&minus, false)?.0) / (2.0 * STEP));
        }
        out.push(check(name.clone(), analytic[g].data(), &numeric));
    }
    Ok(out)
}

/// Op suite plus the tiny-model parameter suite.
pub fn run(seed: u64) -> Result<Report> {
    let (model, prompts, bag) = tiny_setup(seed)?;
    Ok(Report {
        tolerance: TOLERANCE,
        ops: op_suite(seed)?,
        parameters: parameter_suite(&model, &prompts, &bag)?,
    })
}

/// [`run`] with one op's backward rule negated.
#[cfg(any(test, feature = "fault-injection"))]
pub fn run_with_sign_flip(seed: u64, op: &'static str) -> Result<Report> {
    let (model, prompts, bag) = tiny_setup(seed)?;
    Ok(Report {
        tolerance: TOLERANCE,
        ops: op_suite_inner(seed, Some(op))?,
        parameters: parameter_suite_inner(&model, &prompts, &bag, Some(op))?,
    })
}
