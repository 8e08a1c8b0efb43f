use serde::Serialize;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    /// Largest relative error per parameter tensor.
    pub max_rel_error: Vec<f64>,
    pub step: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

/// Checks the gradient of a scalar function of `params`.
///
/// `f` receives a fresh graph and one leaf per parameter and returns the
/// scalar output. Each coordinate is perturbed by `±h`; the relative error is
/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.leaf(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.scalar(out);
        if !v.is_finite() {
            return Err(Error::Numeric(format!("function evaluated to {v}")));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.scalar(out).is_finite() {
        return Err(Error::Numeric(format!("function evaluated to {}", g.scalar(out))));
    }
    let analytic = g.gradients(out, &vars)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel_error = Vec::with_capacity(params.len());
    for (pi, grad) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for ci in 0..params[pi].len() {
            let orig = params[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + h;
            let up = eval(&work)?;
            work[pi].data_mut()[ci] = orig - h;
            let down = eval(&work)?;
            work[pi].data_mut()[ci] = orig;

            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[ci];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
        max_rel_error.push(worst);
    }

    let pass = max_rel_error.iter().all(|&e| e <= tol);
    Ok(GradCheckReport {
        max_rel_error,
        step: h,
        tolerance: tol,
        pass,
    })
}
