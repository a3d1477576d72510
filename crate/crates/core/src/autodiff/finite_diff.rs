//! Central finite differences. These only evaluate the function, so they act
//! as an independent check on the tape-based derivatives.

use super::Tensor;
use crate::error::Result;

/// Central-difference gradient of `f` at `x` with step `eps`.
pub fn gradient(f: impl Fn(&Tensor) -> Result<f64>, x: &Tensor, eps: f64) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for k in 0..x.numel() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[k] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[k] = orig;
        out.data_mut()[k] = (plus - minus) / (2.0 * eps);
    }
    Ok(out)
}

/// `(grad(x + eps v) - grad(x - eps v)) / (2 eps)`.
pub fn hvp(
    grad: impl Fn(&Tensor) -> Result<Tensor>,
    x: &Tensor,
    v: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let step = v.scale(eps);
    let plus = grad(&x.add(&step)?)?;
    let minus = grad(&x.sub(&step)?)?;
    Ok(plus.sub(&minus)?.scale(0.5 / eps))
}

/// Normwise relative error `max|a - b| / max(max|b|, floor)`.
pub fn relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
    diff / b.max_abs().max(floor)
}
