use super::tensor::Tensor;
use crate::error::{contract, Error, Result};

/// Compare an analytic gradient with central differences.
///
/// `f` returns the scalar value and its analytic gradient at the given
/// point. The result is the largest per-coordinate
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(mut f: F, params: &Tensor, h: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<(f64, Tensor)>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(contract(format!(
            "grad_check step {h} outside [1e-6, 1e-3]"
        )));
    }
    let (value, analytic) = f(params)?;
    if !value.is_finite() {
        return Err(Error::Numerical(
            "grad_check: non-finite f at base point".into(),
        ));
    }
    if analytic.shape() != params.shape() {
        return Err(contract(format!(
            "grad_check: gradient shape {:?} differs from parameter shape {:?}",
            analytic.shape(),
            params.shape()
        )));
    }
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for i in 0..params.numel() {
        let x = params.data()[i];
        probe.data_mut()[i] = x + h;
        let (up, _) = f(&probe)?;
        probe.data_mut()[i] = x - h;
        let (down, _) = f(&probe)?;
        probe.data_mut()[i] = x;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numerical(format!(
                "grad_check: non-finite f when perturbing coordinate {i}"
            )));
        }
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
