//! Central finite-difference verification of analytic gradients.
//!
//! The function under test is evaluated on an `f64` graph, so the only
//! discrepancy between the two routes is the O(eps²) truncation of the
//! central difference.

use std::fmt;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Relative-error denominator floor.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradMismatch {
    pub param: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates whose ±eps probes straddle a relu kink.
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
    pub mismatches: Vec<GradMismatch>,
    /// First non-finite evaluation, naming parameter and coordinate.
    pub non_finite: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.non_finite.is_none() && self.mismatches.is_empty()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(msg) = &self.non_finite {
            return write!(f, "FAIL: {msg}");
        }
        write!(
            f,
            "{}: {} coords checked, {} skipped at kinks, max rel err {:.3e}",
            if self.passed() { "pass" } else { "FAIL" },
            self.checked,
            self.skipped_kinks,
            self.max_rel_err
        )?;
        if let Some(m) = self.mismatches.first() {
            write!(
                f,
                "; first mismatch param {} coord {}: analytic {:.6e} vs numeric {:.6e}",
                m.param, m.coord, m.analytic, m.numeric
            )?;
        }
        Ok(())
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

fn evaluate<F>(f: &F, params: &[Tensor<f64>]) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone(), false)).collect();
    let out = f(&mut g, &vars)?;
    Ok((g.value(out).item(), g.kink_pattern()))
}

/// Gradients of `f` with respect to each parameter via [`Graph::backward`].
pub fn analytic_gradients<F>(f: &F, params: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    Ok(vars
        .iter()
        .map(|&v| g.grad(v).cloned().expect("leaf grad populated"))
        .collect())
}

/// Central differences per coordinate. `None` marks coordinates skipped
/// because the two probes land on different relu pieces.
pub struct NumericGradients {
    pub grads: Vec<Vec<Option<f64>>>,
    pub non_finite: Option<String>,
}

pub fn numeric_gradients<F>(f: &F, params: &[Tensor<f64>], eps: f64) -> Result<NumericGradients>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut pg = Vec::with_capacity(params[pi].len());
        for ci in 0..params[pi].len() {
            let orig = params[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + eps;
            let (fp, kp) = evaluate(f, &work)?;
            work[pi].data_mut()[ci] = orig - eps;
            let (fm, km) = evaluate(f, &work)?;
            work[pi].data_mut()[ci] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Ok(NumericGradients {
                    grads,
                    non_finite: Some(format!(
                        "non-finite function value probing param {pi} coordinate {ci}"
                    )),
                });
            }
            pg.push((kp == km).then(|| (fp - fm) / (2.0 * eps)));
        }
        grads.push(pg);
    }
    Ok(NumericGradients {
        grads,
        non_finite: None,
    })
}

/// Compare analytic against numeric gradients with relative tolerance `tol`.
pub fn compare(analytic: &[Tensor<f64>], numeric: &NumericGradients, tol: f64) -> GradCheckReport {
    let mut report = GradCheckReport {
        non_finite: numeric.non_finite.clone(),
        ..Default::default()
    };
    for (pi, (a, n)) in analytic.iter().zip(&numeric.grads).enumerate() {
        for (ci, (&av, nv)) in a.data().iter().zip(n).enumerate() {
            let Some(nv) = *nv else {
                report.skipped_kinks += 1;
                continue;
            };
            report.checked += 1;
            if !av.is_finite() {
                report.non_finite.get_or_insert_with(|| {
                    format!("non-finite analytic gradient at param {pi} coordinate {ci}")
                });
                continue;
            }
            let e = rel_err(av, nv);
            report.max_rel_err = report.max_rel_err.max(e);
            if e > tol {
                report.mismatches.push(GradMismatch {
                    param: pi,
                    coord: ci,
                    analytic: av,
                    numeric: nv,
                    rel_err: e,
                });
            }
        }
    }
    report
}

/// Full check of `f` at `params`: analytic backward vs central differences.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let numeric = numeric_gradients(&f, params, eps)?;
    if numeric.non_finite.is_some() {
        return Ok(compare(&[], &numeric, tol));
    }
    let analytic = analytic_gradients(&f, params)?;
    Ok(compare(&analytic, &numeric, tol))
}
