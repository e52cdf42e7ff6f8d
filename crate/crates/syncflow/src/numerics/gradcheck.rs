//! Gradient verification against centered finite differences.

use crate::error::{Error, Result};
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::GTensor;
use crate::numerics::{Tape, Var};

/// Compares the tape's analytic gradient of a scalar function against
/// centered finite differences, coordinate by coordinate. Returns the
/// maximum over coordinates of
/// `|analytic - numeric| / (|analytic| + 1e-8)`.
///
/// The numeric side divides by the exactly-representable difference of the
/// two perturbed coordinates and accumulates in f64, so the quoted error is
/// dominated by the f32 evaluation of `f` itself.
pub fn grad_check<T: Scalar, F>(mut f: F, x: &GTensor<T>, eps: f32) -> Result<f32>
where
    F: FnMut(&mut Tape<T>, Var) -> Result<Var>,
{
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(Error::config(format!(
            "grad_check eps {eps} outside [1e-5, 1e-2]"
        )));
    }

    // Analytic gradient.
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_grad());
    let y = f(&mut tape, xv)?;
    if tape.value(y).numel() != 1 {
        return Err(Error::config(format!(
            "grad_check needs a scalar function, got shape {:?}",
            tape.value(y).shape()
        )));
    }
    let analytic: Vec<f64> = if tape.requires_grad(y) {
        let grads = tape.backward(y)?;
        match grads.get(xv) {
            Some(g) => g.data().iter().map(|v| v.to_f64()).collect(),
            None => vec![0.0; x.numel()],
        }
    } else {
        // f ignores x entirely; the gradient is identically zero.
        vec![0.0; x.numel()]
    };
    drop(tape);

    let eval = |pt: &GTensor<T>, f: &mut F| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(pt.clone());
        let y = f(&mut tape, v)?;
        // prefer the f64 shadow of scalar reductions when one exists
        match tape.shadow(y) {
            Some(s) => Ok(s),
            None => Ok(tape.value(y).item()?.to_f64()),
        }
    };

    let mut max_rel = 0.0f32;
    let mut probe = x.clone();
    let eps_t = T::from_f32(eps);
    for i in 0..x.numel() {
        let orig = x.data()[i];
        let hi = orig + eps_t;
        let lo = orig - eps_t;
        probe.data_mut()[i] = hi;
        let f_hi = eval(&probe, &mut f)?;
        probe.data_mut()[i] = lo;
        let f_lo = eval(&probe, &mut f)?;
        probe.data_mut()[i] = orig;
        let numeric = (f_hi - f_lo) / (hi.to_f64() - lo.to_f64());
        let rel = ((analytic[i] - numeric).abs() / (analytic[i].abs() + 1e-8)) as f32;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
