//! Central finite differences against the reverse sweep.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of every backward rule it is used to audit.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Step of the central difference.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of [`relative_error`].
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Evaluates `f` on fresh leaves for `inputs` and returns the scalar value.
pub fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
    let out = f(&g, &vars)?;
    Ok(g.scalar(out))
}

/// Reverse-mode gradients of `f` with respect to each input.
pub fn analytic_grads<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(&t.clone().with_grad()))
        .collect();
    let out = f(&g, &vars)?;
    let grads = g.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .get(*v)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect())
}

/// Central-difference gradients of `f` with respect to each input.
pub fn numeric_grads<F>(f: &F, inputs: &[Tensor], h: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let mut out = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for t in 0..inputs.len() {
        let mut grad = vec![0.0; inputs[t].numel()];
        for (i, gi) in grad.iter_mut().enumerate() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + h;
            let plus = eval_scalar(f, &work)?;
            work[t].data_mut()[i] = orig - h;
            let minus = eval_scalar(f, &work)?;
            work[t].data_mut()[i] = orig;
            *gi = (plus - minus) / (2.0 * h);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Largest [`relative_error`] between the analytic and numeric gradients,
/// one entry per input.
pub fn max_relative_errors<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<f64>>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(f, inputs)?;
    let numeric = numeric_grads(f, inputs, FD_STEP)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| {
            a.iter()
                .zip(n)
                .map(|(x, y)| relative_error(*x, *y))
                .fold(0.0, f64::max)
        })
        .collect())
}
