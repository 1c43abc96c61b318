//! Central finite differences against tape gradients.

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Relative error is `|a − n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Check at most this many coordinates per parameter (evenly strided).
    pub max_coords_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-5,
            max_coords_per_param: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoordError {
    pub param: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<CoordError>,
    /// Maximum relative error per parameter tensor.
    pub per_param: Vec<f64>,
    pub coords_checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

fn eval<F>(params: &[Tensor<f64>], loss_fn: &mut F, frozen: &[Tensor<f64>]) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::with_frozen_stops(frozen.to_vec());
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = loss_fn(&mut g, &vars)?;
    let v = g.value(loss).item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {v}")));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of `loss_fn` with central differences
/// `(f(θ+h) − f(θ−h)) / 2h`, one coordinate at a time. `loss_fn` receives a
/// fresh graph and one leaf per entry of `params` and must return a
/// single-element loss. Stop-gradient outputs are frozen at their
/// unperturbed values during the numeric evaluations.
pub fn grad_check<F>(
    params: &[Tensor<f64>],
    mut loss_fn: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = loss_fn(&mut g, &vars)?;
    let base = g.value(loss).item();
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {base}")));
    }
    let grads = g.backward(loss)?;
    let frozen = g.stop_gradient_values();
    drop(g);

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        per_param: vec![0.0; params.len()],
        coords_checked: 0,
        tol: opts.tol,
    };
    for (pi, (&var, p)) in vars.iter().zip(params).enumerate() {
        let analytic = grads.get_or_zeros(var, p.shape());
        let n = p.numel();
        let stride = match opts.max_coords_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for coord in (0..n).step_by(stride) {
            let orig = work[pi].data()[coord];
            work[pi].data_mut()[coord] = orig + opts.step;
            let plus = eval(&work, &mut loss_fn, &frozen)?;
            work[pi].data_mut()[coord] = orig - opts.step;
            let minus = eval(&work, &mut loss_fn, &frozen)?;
            work[pi].data_mut()[coord] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[coord];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.coords_checked += 1;
            if rel > report.per_param[pi] {
                report.per_param[pi] = rel;
            }
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(CoordError {
                    param: pi,
                    coord,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::graph::Reduction;

    #[test]
    fn linear_loss_agrees_to_machine_precision() {
        let w = Tensor::from_fn([1, 1, 2, 3], |[_, _, h, x]| 0.5 + (h * 3 + x) as f64);
        let x = Tensor::from_fn([1, 1, 2, 3], |[_, _, h, x]| -1.0 + 0.25 * (h + x) as f64);
        let report = grad_check(
            &[w, x],
            |g, v| {
                let p = g.mul(v[0], v[1])?;
                Ok(g.sum(p))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
        assert_eq!(report.coords_checked, 12);
    }

    #[test]
    fn detached_leaf_has_zero_sensitivity_both_ways() {
        let h = Tensor::from_fn([1, 3, 2, 2], |[_, c, y, x]| {
            ((c * 7 + y * 3 + x) as f64).sin()
        });
        let f = Tensor::from_fn([1, 3, 2, 2], |[_, c, y, x]| {
            ((c * 5 + y + 2 * x) as f64).cos()
        });
        let report = grad_check(
            &[h, f],
            |g, v| {
                let sf = g.stop_gradient(v[1]);
                let ds = g.dense_similarity(v[0], sf, Reduction::Mean)?;
                Ok(g.scale(ds, -1.0))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        // The detached parameter: analytic zero and numeric zero, so no error.
        assert_eq!(report.per_param[1], 0.0);
    }

    #[test]
    fn non_finite_loss_is_rejected() {
        let x = Tensor::full([1, 1, 1, 1], f64::NAN);
        let err =
            grad_check(&[x], |g, v| Ok(g.sum(v[0])), &GradCheckOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }
}
