//! Central finite-difference verification of analytic gradients.

use std::fmt;

use super::array::Array;
use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Default finite-difference step.
pub const STEP: f64 = 1e-5;
/// Default relative-error tolerance.
pub const TOLERANCE: f64 = 1e-4;
/// Floor of the relative-error denominator.
const DENOM_FLOOR: f64 = 1e-8;

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Coordinate with the largest relative error, e.g. `"mmfa.out.weight[3]"`.
    pub worst: Option<String>,
    pub coordinates: usize,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradReport {
    fn empty(tolerance: f64) -> Self {
        Self {
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst: None,
            coordinates: 0,
            tolerance,
            pass: true,
        }
    }

    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR);
        self.coordinates += 1;
        self.max_abs_error = self.max_abs_error.max(abs);
        // NaN compares false, so a NaN error must fail explicitly.
        if rel > self.max_rel_error || rel.is_nan() {
            self.max_rel_error = rel;
            self.worst = Some(label());
        }
        self.pass = self.max_rel_error < self.tolerance;
    }

    /// Combines two reports over disjoint coordinate sets.
    pub fn merge(mut self, other: GradReport) -> GradReport {
        self.coordinates += other.coordinates;
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        if other.max_rel_error > self.max_rel_error || other.max_rel_error.is_nan() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.tolerance = self.tolerance.min(other.tolerance);
        self.pass = self.pass && other.pass && self.max_rel_error < self.tolerance;
        self
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "max rel err {:.3e} over {} coords ({})",
            self.max_rel_error,
            self.coordinates,
            if self.pass { "pass" } else { "FAIL" }
        )?;
        if let (false, Some(w)) = (self.pass, &self.worst) {
            write!(f, " worst at {w}")?;
        }
        Ok(())
    }
}

fn evaluate<F>(f: &F, store: &ParamStore, inputs: &[Array]) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|a| g.input(a.clone())).collect();
    let out = f(&mut g, store, &vars)?;
    let value = g.value(out);
    if value.len() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            value.shape()
        )));
    }
    let v = value.data()[0];
    if !v.is_finite() {
        return Err(Error::Numeric(format!("checked function evaluated to {v}")));
    }
    Ok(v)
}

/// Checks the gradient of a scalar function with respect to both free inputs
/// and the selected stored parameters.
///
/// Every coordinate `i` is compared with `(f(x+h·e_i) − f(x−h·e_i)) / 2h`;
/// the relative error uses `max(|analytic|, |numeric|, 1e-8)` as denominator.
pub fn grad_check_params<F>(
    store: &ParamStore,
    params: &[ParamId],
    inputs: &[Array],
    f: F,
    step: f64,
    tol: f64,
) -> Result<GradReport>
where
    F: Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    evaluate(&f, store, inputs)?;

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|a| g.input(a.clone())).collect();
    let out = f(&mut g, store, &vars)?;
    g.backward(out)?;
    let input_grads: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, a)| g.grad(v).map_or_else(|| vec![0.0; a.len()], <[f64]>::to_vec))
        .collect();
    let param_grads: Vec<Vec<f64>> = params
        .iter()
        .map(|&id| {
            g.param_grad(id)
                .map_or_else(|| vec![0.0; store.get(id).value.len()], <[f64]>::to_vec)
        })
        .collect();
    drop(g);

    let mut report = GradReport::empty(tol);
    let mut work = inputs.to_vec();
    for (k, analytic) in input_grads.iter().enumerate() {
        for i in 0..work[k].len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let plus = evaluate(&f, store, &work)?;
            work[k].data_mut()[i] = orig - step;
            let minus = evaluate(&f, store, &work)?;
            work[k].data_mut()[i] = orig;
            report.record(
                || format!("input{k}[{i}]"),
                analytic[i],
                (plus - minus) / (2.0 * step),
            );
        }
    }
    let mut scratch = store.clone();
    for (&id, analytic) in params.iter().zip(&param_grads) {
        for i in 0..analytic.len() {
            let orig = scratch.get(id).value.data()[i];
            scratch.get_mut(id).value.data_mut()[i] = orig + step;
            let plus = evaluate(&f, &scratch, inputs)?;
            scratch.get_mut(id).value.data_mut()[i] = orig - step;
            let minus = evaluate(&f, &scratch, inputs)?;
            scratch.get_mut(id).value.data_mut()[i] = orig;
            report.record(
                || format!("{}[{i}]", store.get(id).name),
                analytic[i],
                (plus - minus) / (2.0 * step),
            );
        }
    }
    Ok(report)
}

/// Gradient check of a scalar function of a single array.
pub fn grad_check<F>(f: F, x: &Array, step: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let store = ParamStore::new();
    grad_check_params(
        &store,
        &[],
        std::slice::from_ref(x),
        |g, _, vars| f(g, vars[0]),
        step,
        tol,
    )
}
