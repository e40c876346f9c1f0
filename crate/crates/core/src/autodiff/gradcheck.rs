//! Central finite-difference gradient checks.
//!
//! The numerical side only ever reads forward values, so it stays independent
//! of the backward rules it is checking.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Default central-difference step.
pub const STEP: f64 = 1e-5;
/// Denominator floor for the relative error, so that gradients near zero are
/// compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub entries: usize,
}

/// Compares `backward` against central differences for every entry of every
/// input. `build` records a scalar loss given the input vars.
pub fn check<F>(inputs: &[Tensor], h: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut entries = 0;
    let mut work = inputs.to_vec();
    for (slot, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, inputs[slot].shape());
        for j in 0..inputs[slot].numel() {
            let orig = inputs[slot].data()[j];
            work[slot].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[slot].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[slot].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
            entries += 1;
        }
    }
    Ok(GradCheck {
        max_rel_err: worst,
        entries,
    })
}
