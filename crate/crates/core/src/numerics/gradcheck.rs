//! Central-difference gradient oracle.

use ndarray::Array2;

use super::tape::{BackwardFault, Tape, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub fault: Option<BackwardFault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over coordinates of `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Checks the tape gradient of a scalar function of one matrix.
pub fn finite_difference_check<F>(f: F, x: &Array2<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = finite_difference_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(x),
        GradCheckOptions { step, fault: None },
    )?;
    Ok(report.max_rel_error)
}

/// Checks the tape gradient of a scalar function of several matrices at once.
///
/// `f` must be pure: it is re-evaluated twice per coordinate on fresh tapes.
pub fn finite_difference_check_many<F>(
    f: F,
    inputs: &[Array2<f64>],
    options: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = match options.fault {
        Some(fault) => Tape::with_fault(fault),
        None => Tape::new(),
    };
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |inputs: &[Array2<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out)[[0, 0]])
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let mut work: Vec<Array2<f64>> = inputs
        .iter()
        .map(|x| x.as_standard_layout().into_owned())
        .collect();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .get_or_zeros(*var, inputs[k].dim())
            .as_standard_layout()
            .into_owned();
        for c in 0..inputs[k].len() {
            let original = work[k].as_slice().expect("standard layout")[c];
            work[k].as_slice_mut().expect("standard layout")[c] = original + options.step;
            let plus = eval(&work)?;
            work[k].as_slice_mut().expect("standard layout")[c] = original - options.step;
            let minus = eval(&work)?;
            work[k].as_slice_mut().expect("standard layout")[c] = original;

            let numeric = (plus - minus) / (2.0 * options.step);
            let a = analytic.as_slice().expect("standard layout")[c];
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((k, c));
            }
        }
    }
    Ok(report)
}
