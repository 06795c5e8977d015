//! Central finite-difference gradient checking.

use std::collections::BTreeMap;

use crate::error::TapeError;
use crate::params::{BoundParams, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor for relative errors, so that coordinates whose true
/// gradient is ~0 are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn evaluate<E, F>(params: &ParamSet, f: &F) -> Result<f64, E>
where
    E: From<TapeError>,
    F: Fn(&mut Tape, &BoundParams) -> Result<Var, E>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let loss = f(&mut tape, &bound)?;
    Ok(tape.value(loss).item()?)
}

/// Loss value and reverse-mode gradient for every parameter.
pub fn analytic_gradient<E, F>(params: &ParamSet, f: &F) -> Result<(f64, BTreeMap<String, Tensor>), E>
where
    E: From<TapeError>,
    F: Fn(&mut Tape, &BoundParams) -> Result<Var, E>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let loss = f(&mut tape, &bound)?;
    let value = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    Ok((value, bound.collect(&grads)))
}

/// `(f(p + h e_i) - f(p - h e_i)) / 2h` for every coordinate.
pub fn numeric_gradient<E, F>(params: &ParamSet, h: f64, f: &F) -> Result<BTreeMap<String, Tensor>, E>
where
    E: From<TapeError>,
    F: Fn(&mut Tape, &BoundParams) -> Result<Var, E>,
{
    let mut work = params.clone();
    let mut out = BTreeMap::new();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let len = params.get(&name)?.len();
        let (rows, cols) = params.get(&name)?.shape();
        let mut g = Tensor::zeros(rows, cols);
        for i in 0..len {
            let orig = work.get(&name)?.data()[i];
            work.get_mut(&name)?.data_mut()[i] = orig + h;
            let plus = evaluate(&work, f)?;
            work.get_mut(&name)?.data_mut()[i] = orig - h;
            let minus = evaluate(&work, f)?;
            work.get_mut(&name)?.data_mut()[i] = orig;
            g.data_mut()[i] = (plus - minus) / (2.0 * h);
        }
        out.insert(name, g);
    }
    Ok(out)
}

pub fn compare_gradients(
    analytic: &BTreeMap<String, Tensor>,
    numeric: &BTreeMap<String, Tensor>,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        coords: 0,
    };
    for (name, n) in numeric {
        let zeros;
        let a = match analytic.get(name) {
            Some(a) => a,
            None => {
                zeros = Tensor::zeros(n.rows(), n.cols());
                &zeros
            }
        };
        for (i, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            report.coords += 1;
            let err = relative_error(av, nv);
            if err > report.max_rel_err || err.is_nan() {
                report.max_rel_err = if err.is_nan() { f64::INFINITY } else { err };
                report.worst = Some((name.clone(), i));
            }
        }
    }
    report
}

/// Compares [`Tape::backward`] against central differences with step `h`.
pub fn finite_diff_check<E, F>(params: &ParamSet, h: f64, f: F) -> Result<GradCheckReport, E>
where
    E: From<TapeError>,
    F: Fn(&mut Tape, &BoundParams) -> Result<Var, E>,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let (_, analytic) = analytic_gradient(params, &f)?;
    let numeric = numeric_gradient(params, h, &f)?;
    Ok(compare_gradients(&analytic, &numeric))
}
