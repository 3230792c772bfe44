//! Finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Worst relative disagreement between an analytic gradient and a central
/// finite difference, using `|a - n| / max(1e-8, |a| + |n|)` per coordinate.
pub fn gradient_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / f64::max(1e-8, a.abs() + n.abs()))
        .fold(0.0, f64::max)
}

/// Checks d(f)/d(x) at `x0` against central differences with step `h`.
/// `f` must build a single-element output from the given leaf. Returns the
/// worst per-coordinate relative error.
pub fn grad_check<F>(x0: &Tensor, h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(t)?;
        let y = f(&mut tape, x)?;
        let out = tape.value(y);
        if out.numel() != 1 {
            return Err(Error::Contract(format!(
                "grad_check target must be scalar, got {:?}",
                out.shape()
            )));
        }
        Ok(out.values()[0])
    };

    let mut tape = Tape::new();
    let x = tape.leaf(x0)?;
    let y = f(&mut tape, x)?;
    let grads = tape.backward(y)?;
    let analytic = grads
        .get(x)
        .ok_or_else(|| Error::Contract("leaf missing from gradient map".into()))?
        .values()
        .to_vec();

    let mut numeric = vec![0.0; x0.numel()];
    for i in 0..x0.numel() {
        let mut plus = x0.clone();
        plus.values_mut()[i] += h;
        let mut minus = x0.clone();
        minus.values_mut()[i] -= h;
        numeric[i] = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
    }
    Ok(gradient_rel_err(&analytic, &numeric))
}
