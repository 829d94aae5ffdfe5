//! Central finite-difference oracle for tape gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Worst relative error `|analytic − numeric| / max(1, |analytic|)` over all
/// coordinates of all `params`.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    Ok(finite_diff_report(f, params, step)?
        .into_iter()
        .fold(0.0, f64::max))
}

/// Per-parameter worst relative error, same order as `params`.
pub fn finite_diff_report<F>(f: F, params: &[Tensor], step: f64) -> Result<Vec<f64>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if step <= 0.0 {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let analytic = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = loss.backward()?;
        vars.iter().map(|&v| grads.wrt(v)).collect::<Vec<_>>()
    };

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let tape = Tape::no_grad();
        let vars: Vec<Var<'_>> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        f(&tape, &vars)?.value().item()
    };
    let base = eval(params)?;
    if eval(params)?.to_bits() != base.to_bits() {
        return Err(Error::Contract(
            "function is not deterministic; finite differences are unusable".into(),
        ));
    }

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (pi, grad) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        for i in 0..params[pi].len() {
            let orig = params[pi].data()[i];
            work[pi].data_mut()[i] = orig + step;
            let up = eval(&work)?;
            work[pi].data_mut()[i] = orig - step;
            let down = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = grad.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
        report.push(worst);
    }
    Ok(report)
}
