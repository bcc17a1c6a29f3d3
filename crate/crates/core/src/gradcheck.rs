//! Central finite-difference verification of reverse-mode gradients.
//!
//! The numerical side only ever evaluates the forward function, so it is
//! independent of every adjoint rule it checks.

use rand::Rng;

use crate::autodiff::{OpKind, Tape, Var};
use crate::error::Result;
use crate::rng::{RngState, DATA_STREAM};
use crate::tensor::Tensor;
use crate::transformer::{ForwardOptions, ModelConfig, TransformerModel};

/// Denominator floor for relative errors. Gradients smaller than this are
/// compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct GroupCheck {
    pub name: String,
    pub elements: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    /// Groups whose worst element exceeds `tol`.
    pub fn failures(&self, tol: f64) -> Vec<&GroupCheck> {
        self.groups.iter().filter(|g| !(g.max_rel_error < tol)).collect()
    }
}

/// Compares reverse-mode gradients of `f` against central differences with
/// step `h`, for every element of every input.
///
/// `f` receives a fresh tape with one differentiable leaf per input and must
/// return a scalar. `prepare` is called on each tape before `f`, which lets
/// callers inject faults for negative controls.
pub fn check_gradients<F>(names: &[String], inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    check_gradients_with(names, inputs, h, |_| {}, f)
}

pub fn check_gradients_with<P, F>(
    names: &[String],
    inputs: &[Tensor<f64>],
    h: f64,
    prepare: P,
    f: F,
) -> Result<GradCheckReport>
where
    P: Fn(&Tape<f64>),
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    assert_eq!(names.len(), inputs.len());
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        prepare(&tape);
        let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(&loss)?;
        vars.iter().map(|v| grads.get_or_zeros(v)).collect()
    };

    let eval = |point: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = point.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut point: Vec<Tensor<f64>> = inputs.to_vec();
    let mut groups = Vec::with_capacity(inputs.len());
    for (gi, name) in names.iter().enumerate() {
        let mut worst_rel: f64 = 0.0;
        let mut worst_abs: f64 = 0.0;
        for e in 0..inputs[gi].numel() {
            let orig = point[gi].data()[e];
            point[gi].data_mut()[e] = orig + h;
            let up = eval(&point)?;
            point[gi].data_mut()[e] = orig - h;
            let down = eval(&point)?;
            point[gi].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[gi].data()[e];
            let rel = relative_error(a, numeric);
            // NaN must register as a failure
            worst_rel = if rel.is_nan() || worst_rel.is_nan() {
                f64::NAN
            } else {
                worst_rel.max(rel)
            };
            worst_abs = worst_abs.max((a - numeric).abs());
        }
        groups.push(GroupCheck {
            name: name.clone(),
            elements: inputs[gi].numel(),
            max_rel_error: worst_rel,
            max_abs_error: worst_abs,
        });
    }
    Ok(GradCheckReport { groups })
}

/// Finite-difference check of every parameter of a model built from
/// `config`, in `f64`, on the training-mode total loss of one fixed batch.
///
/// The latent noise is a function of the RNG counter, which stays fixed
/// across all evaluations, so `ε` is frozen. `fault` optionally corrupts one
/// adjoint rule on the analytic pass.
pub fn check_model_gradients(
    config: &ModelConfig,
    seed: u64,
    batch: usize,
    h: f64,
    fault: Option<(OpKind, f64)>,
) -> Result<GradCheckReport> {
    let model = TransformerModel::<f64>::new(config.clone(), seed)?;
    let n = batch * config.seq_len;
    let mut draw = RngState::new(seed).stream(DATA_STREAM);
    let tokens: Vec<usize> = (0..n).map(|_| draw.random_range(0..config.vocab_size)).collect();
    let targets: Vec<usize> = (0..n).map(|_| draw.random_range(0..config.vocab_size)).collect();
    let opts = ForwardOptions::train(RngState::at(seed, 1));
    check_gradients_with(
        model.params.names(),
        model.params.tensors(),
        h,
        |tape| {
            if let Some((kind, factor)) = fault {
                tape.inject_adjoint_fault(kind, factor);
            }
        },
        |_, vars| model.forward(vars, &tokens, batch, Some(&targets), &opts)?.total_loss(),
    )
}
