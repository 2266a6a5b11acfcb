//! Central finite-difference gradient checking.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Floor of the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn outputs<T: Scalar, F>(op: &F, inputs: &[Tensor<T>]) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = op(&mut g, &vars)?;
    Ok(g.value(out).data().iter().map(|v| v.as_f64()).collect())
}

/// Fourth-order central difference of `sum(op(inputs))` in element `j` of
/// input `i`:
/// `(8·[f(x+h) − f(x−h)] − [f(x+2h) − f(x−2h)]) / 12h`.
/// Differences are taken per output element before summing, so outputs the
/// perturbation does not reach cancel exactly instead of adding the
/// rounding of two large totals.
fn central_difference<F>(
    op: &F,
    work: &mut [Tensor<f64>],
    i: usize,
    j: usize,
    eps: f64,
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let orig = work[i].data()[j];
    let mut at = |delta: f64| {
        work[i].data_mut()[j] = orig + delta;
        outputs(op, work)
    };
    let (p1, m1, p2, m2) = (at(eps)?, at(-eps)?, at(2.0 * eps)?, at(-2.0 * eps)?);
    work[i].data_mut()[j] = orig;
    let mut acc = 0.0;
    for k in 0..p1.len() {
        acc += 8.0 * (p1[k] - m1[k]) - (p2[k] - m2[k]);
    }
    Ok(acc / (12.0 * eps))
}

fn analytic_grads<T: Scalar, F>(op: &F, inputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = op(&mut g, &vars)?;
    let loss = g.sum(out);
    let grads = g.backward(loss)?;
    Ok(vars.iter().map(|&v| grads.get(v)).collect())
}

fn central_differences<F>(op: &F, inputs: &[Tensor<f64>], eps: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut col = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            col.push(central_difference(op, &mut work, i, j, eps)?);
        }
        out.push(col);
    }
    Ok(out)
}

fn check_inputs(inputs: &[Tensor<f64>], eps: f64) -> Result<()> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "eps must be positive, got {eps}"
        )));
    }
    if inputs
        .iter()
        .any(|t| t.data().iter().any(|v| !v.is_finite()))
    {
        return Err(Error::InvalidArgument("non-finite gradcheck input".into()));
    }
    Ok(())
}

/// Maximum relative error between the reverse-mode gradient of
/// `sum(op(inputs))` and fourth-order central differences with step `eps`,
/// over every element of every input.
pub fn fd_check<F>(op: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_inputs(inputs, eps)?;
    let analytic = analytic_grads(&op, inputs)?;
    let numeric = central_differences(&op, inputs, eps)?;
    Ok(max_error(&analytic, &numeric))
}

/// Checks the 32-bit backward pass: the analytic gradient is computed by
/// `op32` in `f32`, the central differences by `op64` in `f64` (the same
/// op instantiated at both precisions).
pub fn fd_check_f32<F32, F64>(op32: F32, op64: F64, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F32: Fn(&mut Graph<f32>, &[Var]) -> Result<Var>,
    F64: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_inputs(inputs, eps)?;
    let inputs32: Vec<Tensor<f32>> = inputs.iter().map(|t| t.cast()).collect();
    let analytic = analytic_grads(&op32, &inputs32)?;
    let numeric = central_differences(&op64, inputs, eps)?;
    Ok(max_error(&analytic, &numeric))
}

/// [`fd_check`] restricted to the listed `(input, element)` coordinates.
pub fn fd_check_sampled<F>(
    op: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    coords: &[(usize, usize)],
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_inputs(inputs, eps)?;
    if let Some(&(i, j)) = coords
        .iter()
        .find(|&&(i, j)| i >= inputs.len() || j >= inputs[i].len())
    {
        return Err(Error::InvalidArgument(format!(
            "coordinate ({i}, {j}) is out of range"
        )));
    }
    let analytic = analytic_grads(&op, inputs)?;
    let mut work = inputs.to_vec();
    let mut worst = 0.0f64;
    for &(i, j) in coords {
        worst = worst.max(relative_error(
            analytic[i].data()[j],
            central_difference(&op, &mut work, i, j, eps)?,
        ));
    }
    Ok(worst)
}

fn max_error<T: Scalar>(analytic: &[Tensor<T>], numeric: &[Vec<f64>]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| {
            a.data()
                .iter()
                .zip(n)
                .map(|(a, n)| relative_error(a.as_f64(), *n))
        })
        .fold(0.0, f64::max)
}
