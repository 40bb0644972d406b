//! Central-difference gradient verification (64-bit only).

use crate::autodiff::{Graph, Var};
use crate::error::{G2pError, Result};
use crate::tensor::Tensor;

/// Worst disagreement found by a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor index, element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares `analytic` gradients against central differences of `eval`.
///
/// `eval` receives the full parameter list with one entry perturbed.
pub fn grad_check_with<F>(mut eval: F, params: &[Tensor<f64>], analytic: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(G2pError::shape("grad_check", &[params.len()], &[analytic.len()]));
    }
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let base = eval(&work)?;
    if !base.is_finite() {
        return Err(G2pError::Numeric(format!("non-finite loss {base} in grad_check")));
    }
    for (ti, grad) in analytic.iter().enumerate() {
        if grad.shape() != params[ti].shape() {
            return Err(G2pError::shape("grad_check", params[ti].shape(), grad.shape()));
        }
        for ei in 0..grad.numel() {
            let orig = work[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let plus = eval(&work)?;
            work[ti].data_mut()[ei] = orig - h;
            let minus = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(G2pError::Numeric("non-finite loss in grad_check".into()));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[ei];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((ti, ei));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Gradient check for a scalar function built on a [`Graph`]. Each parameter
/// is bound as a leaf; `f` must return a `[1]`-shaped node.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let run = |ps: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.leaf(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok((g, vars, out))
    };
    let (g, vars, out) = run(params)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    grad_check_with(
        |ps| {
            let (g, _, out) = run(ps)?;
            Ok(g.value(out).data()[0])
        },
        params,
        &analytic,
        h,
    )
}
