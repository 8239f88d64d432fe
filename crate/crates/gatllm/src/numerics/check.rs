//! Central finite-difference gradient verification.

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Max relative error between the recorded gradient and a central finite
/// difference, over every coordinate of `x`.
///
/// The relative error per coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> f64
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>,
{
    finite_diff_check_multi(|tape, vars| f(tape, vars[0]), &[x.clone()], h)
        .into_iter()
        .fold(0.0, f64::max)
}

/// Multi-input variant: one max relative error per input tensor.
pub fn finite_diff_check_multi<F>(f: F, xs: &[Tensor], h: f64) -> Vec<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    finite_diff_check_multi_with_atol(f, xs, h, 0.0)
}

/// Like [`finite_diff_check_multi`], but coordinates whose absolute
/// analytic/numeric disagreement is below `atol` are accepted outright.
/// Central differences at step h resolve a gradient only down to roughly
/// `eps_machine * |f| / (2h)`; below that, the relative-error formula
/// amplifies float dust (e.g. the structurally-zero key bias direction under
/// softmax shift invariance) into spurious failures.
pub fn finite_diff_check_multi_with_atol<F>(f: F, xs: &[Tensor], h: f64, atol: f64) -> Vec<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    assert!(h > 0.0, "finite_diff_check: h must be positive");
    let eval = |inputs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        f(&tape, &vars).value().item()
    };

    // Analytic gradients from one recorded pass.
    let tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(loss).expect("finite_diff_check: backward failed");

    let mut errors = Vec::with_capacity(xs.len());
    let mut work: Vec<Tensor> = xs.to_vec();
    for (i, x) in xs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]);
        let mut max_err: f64 = 0.0;
        for c in 0..x.len() {
            let orig = x.data()[c];
            work[i].data_mut()[c] = orig + h;
            let up = eval(&work);
            work[i].data_mut()[c] = orig - h;
            let down = eval(&work);
            work[i].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[c];
            if (a - numeric).abs() < atol {
                continue;
            }
            let denom = a.abs().max(numeric.abs()).max(1e-12);
            max_err = max_err.max((a - numeric).abs() / denom);
        }
        errors.push(max_err);
    }
    errors
}
