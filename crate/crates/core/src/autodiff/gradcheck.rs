//! Central finite-difference oracle for analytic gradients.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
    pub max_abs_error: f64,
    /// Near-zero coordinates whose disagreement is below the difference
    /// quotient's round-off resolution; they do not contribute to
    /// `max_rel_error`.
    pub below_resolution: usize,
    pub resolution: f64,
}

/// Smallest gradient difference a central quotient can resolve at loss
/// value `loss`: a few ulps of the loss over `2·eps`.
pub fn fd_resolution(loss: f64, eps: f64) -> f64 {
    8.0 * f64::EPSILON * loss.abs().max(1.0) / (2.0 * eps)
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares backprop gradients of `loss_fn` against central differences.
///
/// `loss_fn` receives an eval-mode graph and the bound parameter leaves and
/// must return a scalar. At most `per_param` evenly spaced coordinates of each
/// parameter tensor are probed.
pub fn grad_check_fd<F>(
    params: &ParamStore<f64>,
    eps: f64,
    per_param: usize,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'static, f64>, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Domain(format!("finite-difference eps {eps} outside [1e-6, 1e-3]")));
    }
    let mut g = Graph::eval();
    let vars = params.bind(&mut g, true);
    let root = loss_fn(&mut g, &vars)?;
    g.backward(root)?;
    let resolution = fd_resolution(g.value(root).item(), eps);
    let analytic = params.grads_from(&g, &vars);

    let eval = |p: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::eval();
        let vars = p.bind(&mut g, false);
        let root = loss_fn(&mut g, &vars)?;
        Ok(g.value(root).item())
    };

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
        max_abs_error: 0.0,
        below_resolution: 0,
        resolution,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        let len = grad.len();
        let count = len.min(per_param.max(1));
        for s in 0..count {
            let idx = s * len / count;
            let orig = probe.get(pi).data()[idx];
            probe.get_mut(pi).data_mut()[idx] = orig + eps;
            let plus = eval(&probe)?;
            probe.get_mut(pi).data_mut()[idx] = orig - eps;
            let minus = eval(&probe)?;
            probe.get_mut(pi).data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            report.checked += 1;
            let abs_err = (grad[idx] - numeric).abs();
            report.max_abs_error = report.max_abs_error.max(abs_err);
            // Relative error is only meaningful once the gradient is well
            // above the quotient's resolution.
            let tiny = grad[idx].abs() + numeric.abs() < 1e4 * resolution;
            if tiny && abs_err <= resolution {
                report.below_resolution += 1;
                continue;
            }
            let err = relative_error(grad[idx], numeric);
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst_param = params.name(pi).to_string();
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}
