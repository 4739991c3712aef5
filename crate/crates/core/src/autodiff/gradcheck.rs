//! Central-difference gradient verification.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic - numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    /// (input index, flat coordinate) where the maximum occurred
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Checks a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, xs| f(tape, xs[0]), std::slice::from_ref(x), h)
}

/// Checks a scalar function of several tensors at once.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    let mut work: Vec<Tensor> = xs.to_vec();
    for (t, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, xs[t].len());
        for c in 0..xs[t].len() {
            let orig = xs[t].data()[c];
            work[t].data_mut()[c] = orig + h;
            let up = eval(&work)?;
            work[t].data_mut()[c] = orig - h;
            let down = eval(&work)?;
            work[t].data_mut()[c] = orig;

            let numeric = (up - down) / (2.0 * h);
            let err = (analytic[c] - numeric).abs() / numeric.abs().max(1.0);
            if !err.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient check at input {t}, coordinate {c}: analytic {}, numeric {numeric}",
                    analytic[c]
                )));
            }
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (t, c);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}
