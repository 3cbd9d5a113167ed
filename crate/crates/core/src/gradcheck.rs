//! Finite-difference gradient verification.
//!
//! Treats the function under test as a black box from a flat input vector to
//! a scalar, perturbs one coordinate at a time with a central difference, and
//! reports the worst relative disagreement against the supplied analytic
//! gradient.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

pub const GRAD_CHECK_EPS: f64 = 1e-5;
pub const GRAD_TOL_PRIMITIVE: f64 = 1e-4;
pub const GRAD_TOL_COMPOSITE: f64 = 1e-3;

/// Max over coordinates of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`
/// where `numeric` is the central difference at `eps`.
pub fn check_gradients(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    x0: &[f64],
    analytic: &[f64],
    eps: f64,
) -> Result<f64> {
    if x0.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "gradient length {} does not match input length {}",
            analytic.len(),
            x0.len()
        )));
    }
    let mut x = x0.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let keep = x[i];
        x[i] = keep + eps;
        let fp = f(&x)?;
        x[i] = keep - eps;
        let fm = f(&x)?;
        x[i] = keep;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite objective near coordinate {i}: f+={fp}, f-={fm}"
            )));
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Convenience wrapper: runs [`check_gradients`] at the standard epsilon and
/// compares against a tolerance.
pub fn grad_check(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    x0: &[f64],
    analytic: &[f64],
    tol: f64,
) -> Result<f64> {
    let worst = check_gradients(f, x0, analytic, GRAD_CHECK_EPS)?;
    if worst >= tol {
        return Err(Error::Numeric(format!(
            "gradient check failed: max relative error {worst:.3e} >= {tol:.1e}"
        )));
    }
    Ok(worst)
}

/// Checks a tape computation against central differences. `build` must map
/// the flat input vector to a scalar root, returning the input leaves in the
/// order their values were consumed from `x`; their concatenated gradients
/// are compared coordinate by coordinate.
pub fn check_op(
    x0: &[f64],
    build: &dyn Fn(&mut Tape, &[f64]) -> Result<(Var, Vec<Var>)>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (root, inputs) = build(&mut tape, x0)?;
    tape.backward(root)?;
    let mut analytic = Vec::with_capacity(x0.len());
    for v in &inputs {
        match tape.grad(*v) {
            Some(g) => analytic.extend_from_slice(g),
            None => analytic.extend(std::iter::repeat(0.0).take(tape.value(*v).numel())),
        }
    }
    if analytic.len() != x0.len() {
        return Err(Error::Shape(format!(
            "input leaves cover {} scalars but x0 has {}",
            analytic.len(),
            x0.len()
        )));
    }
    let mut f = |x: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let (root, _) = build(&mut tape, x)?;
        Ok(tape.value(root).values()[0])
    };
    check_gradients(&mut f, x0, &analytic, GRAD_CHECK_EPS)
}
