use alloc::vec::Vec;

use super::grad_vector::{GradVector, Layout};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient estimate, one coordinate at a time:
/// `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn fd_oracle(mut f: impl FnMut(&Tensor) -> Result<f64>, x: &Tensor, h: f64) -> Result<GradVector> {
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::invalid("h", "step must be positive"));
    }
    let mut probe = x.clone().into_data();
    let mut out = Vec::with_capacity(probe.len());
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&Tensor::new(x.shape().to_vec(), probe.clone())?)?;
        probe[i] = orig - h;
        let minus = f(&Tensor::new(x.shape().to_vec(), probe.clone())?)?;
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("fd_oracle"));
        }
        out.push((plus - minus) / (2.0 * h));
    }
    GradVector::new(Layout::single("x", x.shape()), out)
}

/// `max_i |a_i - b_i| / max(max_i |b_i|, floor)`: the relative error used by
/// the gradient checks.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let scale = b.iter().fold(floor, |m, v| m.max(v.abs()));
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = fd_oracle(|t| Ok(t.item()? * t.item()?), &Tensor::scalar(3.0), 1e-4).unwrap();
        assert!((g.values()[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn sine_at_zero() {
        let g = fd_oracle(|t| Ok(libm::sin(t.item()?)), &Tensor::scalar(0.0), 1e-5).unwrap();
        assert!((g.values()[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        let x = Tensor::scalar(1.0);
        assert!(fd_oracle(|t| t.item(), &x, 0.0).is_err());
        assert_eq!(
            fd_oracle(|_| Ok(f64::INFINITY), &x, 1e-3),
            Err(Error::NonFinite("fd_oracle"))
        );
    }
}
