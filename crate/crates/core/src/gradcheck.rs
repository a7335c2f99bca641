//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so exact-zero gradients compare absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub index: usize,
    pub max_rel_error: f64,
    pub worst_element: usize,
    /// Tape and finite-difference values at `worst_element`.
    pub analytic: f64,
    pub numeric: f64,
    /// Elements accepted through a one-sided difference because a kink lies inside the stencil.
    pub one_sided: usize,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub params: Vec<ParamReport>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval_scalar<F>(f: &F, params: &[Tensor<f64>], which: usize, element: usize) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out).item();
    if !v.is_finite() {
        return Err(Error::NonFinite { context: format!("objective while perturbing parameter {which}"), index: element });
    }
    Ok(v)
}

/// Compares gradients from [`Graph::backward`] against central differences
/// `(f(x + eps) - f(x - eps)) / 2 eps` for every element of every parameter.
pub fn finite_difference_check<F>(f: F, params: &[Tensor<f64>], eps: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    for (i, p) in params.iter().enumerate() {
        if let Some(index) = p.first_non_finite() {
            return Err(Error::NonFinite { context: format!("parameter {i}"), index });
        }
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let base = g.value(loss).item();
    let grads = g.backward(loss)?;

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut reports = Vec::with_capacity(params.len());
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(params[pi].shape()));
        if let Some(index) = analytic.first_non_finite() {
            return Err(Error::NonFinite { context: format!("analytic gradient of parameter {pi}"), index });
        }
        let mut worst = ParamReport { index: pi, max_rel_error: 0.0, worst_element: 0, analytic: 0.0, numeric: 0.0, one_sided: 0 };
        for e in 0..params[pi].len() {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = orig + eps;
            let up = eval_scalar(&f, &work, pi, e)?;
            work[pi].data_mut()[e] = orig - eps;
            let down = eval_scalar(&f, &work, pi, e)?;
            work[pi].data_mut()[e] = orig;
            let a = analytic.data()[e];
            let mut numeric = (up - down) / (2.0 * eps);
            let mut err = relative_error(a, numeric);
            if err >= tol {
                // A kink inside [x - eps, x + eps]: the tape follows the side x lies on,
                // so compare against second-order one-sided differences on each side.
                let h = eps / 2.0;
                work[pi].data_mut()[e] = orig + h;
                let up_half = eval_scalar(&f, &work, pi, e)?;
                work[pi].data_mut()[e] = orig - h;
                let down_half = eval_scalar(&f, &work, pi, e)?;
                work[pi].data_mut()[e] = orig;
                let fwd = (4.0 * up_half - 3.0 * base - up) / (2.0 * h);
                let bwd = (3.0 * base - 4.0 * down_half + down) / (2.0 * h);
                let side = if relative_error(a, fwd) < relative_error(a, bwd) { fwd } else { bwd };
                if relative_error(a, side) < tol {
                    worst.one_sided += 1;
                    numeric = side;
                    err = relative_error(a, side);
                }
            }
            if err > worst.max_rel_error {
                worst.max_rel_error = err;
                worst.worst_element = e;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        reports.push(worst);
    }
    let max_rel_error = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(GradReport { params: reports, max_rel_error, tolerance: tol })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new(&[3], vec![0.5, -1.25, 2.0]).unwrap();
        let report = finite_difference_check(
            |g, p| {
                let sq = g.mul(p[0], p[0])?;
                let s = g.scale(sq, 1.5);
                Ok(g.sum(s))
            },
            &[x],
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn kink_inside_stencil_uses_one_sided_difference() {
        let x = Tensor::new(&[2], vec![3e-6, -0.5]).unwrap();
        let report = finite_difference_check(|g, p| {
            let r = g.relu(p[0]);
            Ok(g.sum(r))
        }, &[x], 1e-5, 1e-4).unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.params[0].one_sided, 1);
    }

    #[test]
    fn wrong_gradient_still_fails() {
        let x = Tensor::new(&[1], vec![0.7]).unwrap();
        // Value 2x but the tape sees x: the stop-gradient copy hides half the slope.
        let report = finite_difference_check(
            |g, p| {
                let frozen = g.constant(g.value(p[0]).clone());
                let s = g.add(p[0], frozen)?;
                Ok(g.sum(s))
            },
            &[x],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn non_finite_parameter_is_reported() {
        let x = Tensor::new(&[2], vec![1.0, f64::NAN]).unwrap();
        let err = finite_difference_check(|g, p| Ok(g.sum(p[0])), &[x], 1e-5, 1e-4).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }));
    }
}
