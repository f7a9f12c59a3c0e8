//! Central-difference gradient checking.
//!
//! Precondition: `f` is differentiable at `point`. Functions with a kink
//! (relu at 0, L1 at 0, a clamp boundary) inside `±eps` of any coordinate
//! are outside the contract and may report large errors.

use crate::error::Result;
use crate::tensor::Tensor;

/// Max over coordinates of `|analytic - numeric| / max(1e-12, |analytic| + |numeric|)`.
/// Any non-finite intermediate yields `+inf`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let shape = point.shape().to_vec();
    let x = Tensor::param(&shape, point.values().to_vec())?;
    let loss = f(&x)?;
    loss.backward()?;
    let analytic = x.grad().unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |values: Vec<f64>| -> Result<f64> { Ok(f(&Tensor::new(&shape, values)?)?.item()) };

    let mut worst: f64 = 0.0;
    for i in 0..point.numel() {
        let mut plus = point.values().to_vec();
        let mut minus = plus.clone();
        plus[i] += eps;
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic[i];
        if !numeric.is_finite() || !a.is_finite() {
            return Ok(f64::INFINITY);
        }
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
