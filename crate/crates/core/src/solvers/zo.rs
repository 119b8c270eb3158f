use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::RngStream;

/// Two-point estimate `d · (F(x + μu) − F(x − μu)) / (2μ) · u` with `u`
/// uniform on the unit sphere in `d = x.len()` dimensions. Unbiased for the
/// gradient of the ball-smoothed `F`; exact in expectation for linear and
/// quadratic `F`.
pub fn zo_two_point_grad(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    radius: f64,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::Config(format!("zeroth-order radius must be > 0, got {radius}")));
    }
    let d = x.len();
    let u = rng.unit_sphere(d);
    let shifted = |sign: f64| -> Vec<f64> { x.iter().zip(&u).map(|(a, b)| a + sign * radius * b).collect() };
    let plus = f(&shifted(1.0))?;
    let minus = f(&shifted(-1.0))?;
    if !(plus.is_finite() && minus.is_finite()) {
        return Err(Error::NonFinite("zeroth-order function value".into()));
    }
    let coef = d as f64 * (plus - minus) / (2.0 * radius);
    Ok(u.into_iter().map(|ui| coef * ui).collect())
}

/// Smoothing radius and step size of the zeroth-order inner solver.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZoState {
    pub radius: f64,
    pub lr: f64,
}

impl ZoState {
    pub fn new(radius: f64, lr: f64) -> Result<Self> {
        if !(radius > 0.0) || !(lr > 0.0) {
            return Err(Error::Config(format!("zeroth-order radius {radius}, lr {lr}")));
        }
        Ok(Self { radius, lr })
    }

    /// One step `x ← x − α ĝ` on a flat vector.
    pub fn step<T: Scalar>(
        &self,
        x: &mut [T],
        f: impl FnMut(&[f64]) -> Result<f64>,
        rng: &mut RngStream,
    ) -> Result<()> {
        let flat: Vec<f64> = x.iter().map(|v| v.to_f64_lossy()).collect();
        let g = zo_two_point_grad(f, &flat, self.radius, rng)?;
        for (xi, gi) in x.iter_mut().zip(g) {
            *xi -= T::of(self.lr * gi);
        }
        Ok(())
    }
}
