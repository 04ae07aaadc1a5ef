//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of every backward rule it is used to verify.

use super::tape::{Tape, Var};
use super::tensor::DenseTensor;
use crate::error::Result;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on an absolute scale of `1e-6 * tol`.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// (input index, coordinate, analytic, numeric) of the worst coordinate.
    pub worst: (usize, usize, f64, f64),
    pub coordinates: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval<F>(inputs: &[DenseTensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.scalar_value(out))
}

/// Compares the tape's gradients of the scalar `f(inputs)` with central differences.
pub fn check<F>(inputs: &[DenseTensor], step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0, 0.0, 0.0),
        coordinates: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, inputs[i].len());
        for c in 0..inputs[i].len() {
            let orig = inputs[i].values()[c];
            probe[i].values_mut()[c] = orig + step;
            let up = eval(&probe, &f)?;
            probe[i].values_mut()[c] = orig - step;
            let down = eval(&probe, &f)?;
            probe[i].values_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = rel_err(analytic[c], numeric);
            report.coordinates += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (i, c, analytic[c], numeric);
            }
        }
    }
    Ok(report)
}
