//! Central finite-difference checks for tape gradients, in 64-bit.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Step used for every central difference.
pub const FD_STEP: f64 = 1e-6;

/// Magnitude below which relative error is measured against this floor
/// instead of the gradient itself. At h = 1e-6 the rounding noise of a
/// central difference is around 1e-10 times the loss, so comparing tiny
/// gradients purely relatively would measure that noise.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// (input index, flat element index) of the worst relative error.
    pub worst: (usize, usize),
    pub n_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares tape gradients of `build` against central differences for every
/// element of every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    check_selected(inputs, &vec![true; inputs.len()], build)
}

/// Like [`check_gradients`] but only perturbs inputs flagged in `check`.
/// Unflagged inputs are still recorded as trainable leaves.
pub fn check_selected<F>(inputs: &[Tensor<f64>], check: &[bool], build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.param(v.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        n_checked: 0,
    };
    let mut work = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        if !check[i] {
            continue;
        }
        let analytic = grads.get(*var).expect("trainable leaf has a gradient").clone();
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            let rel = relative_error(a, numeric);
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (i, j);
            }
            report.n_checked += 1;
        }
    }
    Ok(report)
}
