use serde::{Deserialize, Serialize};

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_err: f64,
    pub step: f64,
    pub seed: u64,
    /// Maximum relative error per parameter tensor, in argument order.
    #[serde(skip)]
    pub per_param: Vec<f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Relative error with a `max(1, |a|, |n|)` denominator.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn eval_scalar<F>(params: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let t = g.value(out);
    if t.numel() != 1 {
        return Err(Error::Contract(format!("gradient check needs a scalar function, got {:?}", t.shape())));
    }
    Ok(t.item())
}

/// Analytic gradients of `f` with respect to every tensor in `params`.
pub fn analytic_gradients<F>(params: &[Tensor], f: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone().requires_grad())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    Ok(vars.iter().map(|&v| g.grad(v).expect("leaf gradient").to_vec()).collect())
}

/// Compares supplied analytic gradients against central differences of `f`.
///
/// Split from [`finite_diff_check`] so a deliberately wrong gradient can be
/// fed through the same comparison.
pub fn compare_with_central_differences<F>(
    op_name: &str,
    params: &[Tensor],
    analytic: &[Vec<f64>],
    step: f64,
    seed: u64,
    f: &F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::Input(format!("finite-difference step must be positive, got {step}")));
    }
    let base = eval_scalar(params, f)?;
    if !base.is_finite() {
        return Err(Error::Input(format!("{op_name}: function value is not finite")));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    for (pi, grads) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for (j, &a) in grads.iter().enumerate() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + step;
            let plus = eval_scalar(&work, f)?;
            work[pi].data_mut()[j] = orig - step;
            let minus = eval_scalar(&work, f)?;
            work[pi].data_mut()[j] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Input(format!("{op_name}: non-finite value near parameter {pi}[{j}]")));
            }
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(rel_err(a, numeric));
        }
        per_param.push(worst);
    }
    Ok(GradCheckReport {
        op_name: op_name.to_string(),
        max_rel_err: per_param.iter().copied().fold(0.0, f64::max),
        step,
        seed,
        per_param,
    })
}

/// Central-difference check of the graph's backward pass for scalar `f`.
///
/// ```
/// use lifusion::tensor::{finite_diff_check, Tensor};
///
/// let p = Tensor::new(vec![1], vec![3.0]).unwrap();
/// let report = finite_diff_check("square", &[p], 1e-5, 0, |g, v| {
///     let sq = g.mul(v[0], v[0])?;
///     Ok(g.sum(sq))
/// })
/// .unwrap();
/// assert!(report.max_rel_err < 1e-8);
/// ```
pub fn finite_diff_check<F>(op_name: &str, params: &[Tensor], step: f64, seed: u64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(params, &f)?;
    compare_with_central_differences(op_name, params, &analytic, step, seed, &f)
}
