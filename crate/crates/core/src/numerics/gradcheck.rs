use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares the reverse-mode gradient of a scalar function against central
/// finite differences `(f(x+h) - f(x-h)) / 2h`, element by element.
///
/// Returns `max_i |a_i - b_i| / max(|a_i|, |b_i|, 1e-8)`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Config("grad_check step must be positive".into()));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone().with_requires_grad(true));
    let y = f(&mut tape, x)?;
    if tape.value(y).numel() != 1 {
        return Err(Error::shape(
            "grad_check",
            "output",
            format!("function must be scalar, got {:?}", tape.shape(y)),
        ));
    }
    tape.value(y).check_finite("grad_check output")?;
    tape.backward(y)?;
    let analytic = tape
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.numel()]);

    let eval = |p: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(p);
        let out = f(&mut t, v)?;
        let val = t.value(out).item();
        if val.is_finite() {
            Ok(val)
        } else {
            Err(Error::NonFinite("grad_check probe".into()))
        }
    };

    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
