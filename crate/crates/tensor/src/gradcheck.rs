//! Central finite-difference oracle for analytic gradients.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Floor of the relative-error denominator. Coordinates whose gradient is
/// below it are compared absolutely; it sits well above the f64 roundoff of
/// central differences at steps around 1e-5.
pub const REL_EPS: f64 = 1e-6;

/// Worst coordinate of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamError {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamError>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.params.iter().all(|p| p.max_rel_error < tolerance)
    }

    /// Indices of parameters whose error is at or above `tolerance`.
    pub fn failures(&self, tolerance: f64) -> Vec<usize> {
        (0..self.params.len())
            .filter(|&i| self.params[i].max_rel_error >= tolerance)
            .collect()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_EPS)
}

fn evaluate<T, F>(f: &F, params: &[Tensor<T>], track: bool) -> Result<(Graph<T>, Vec<Var>, Var)>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| {
            if track {
                g.param(p.clone())
            } else {
                g.constant(p.clone())
            }
        })
        .collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(TensorError::NonScalarLoss(g.shape(out).to_vec()));
    }
    Ok((g, vars, out))
}

/// Compares the analytic gradient of `f` at `params` with central
/// differences `(f(p + h·e) − f(p − h·e)) / 2h` for every coordinate.
///
/// `f` receives a fresh graph and one leaf per parameter and must return a
/// scalar. It is evaluated twice up front; differing results are reported as
/// an oracle error since finite differences are meaningless for a
/// non-deterministic function.
pub fn grad_check<T, F>(f: F, params: &[Tensor<T>], step: f64) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(TensorError::InvalidParameter {
            op: "grad_check",
            reason: format!("step must be positive, got {step}"),
        });
    }
    let (mut g, vars, out) = evaluate(&f, params, true)?;
    let base = g.value(out).item();
    let (g2, _, out2) = evaluate(&f, params, false)?;
    let again = g2.value(out2).item();
    if base != again {
        return Err(TensorError::Oracle(format!(
            "function is not deterministic: {base} vs {again}"
        )));
    }
    let grads = g.backward(out)?;

    let h = T::lit(step);
    let mut report = Vec::with_capacity(params.len());
    let mut work: Vec<Tensor<T>> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("gradient for every parameter");
        let mut worst = ParamError {
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..params[pi].len() {
            let orig = params[pi].data()[i];
            work[pi].data_mut()[i] = orig + h;
            let (gp, _, op) = evaluate(&f, &work, false)?;
            let plus = gp.value(op).item();
            work[pi].data_mut()[i] = orig - h;
            let (gm, _, om) = evaluate(&f, &work, false)?;
            let minus = gm.value(om).item();
            work[pi].data_mut()[i] = orig;

            let numeric = (plus - minus).to_f64().unwrap() / (2.0 * step);
            let a = analytic.data()[i].to_f64().unwrap();
            let err = relative_error(a, numeric);
            if err > worst.max_rel_error || !err.is_finite() {
                worst = ParamError {
                    max_rel_error: if err.is_finite() { err } else { f64::INFINITY },
                    worst_index: i,
                    analytic: a,
                    numeric,
                };
            }
        }
        report.push(worst);
    }
    Ok(GradCheckReport { params: report })
}
