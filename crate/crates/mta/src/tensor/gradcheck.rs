//! Finite-difference gradient oracle.
//!
//! [`finite_diff_gradient`] never touches the reverse-mode machinery: it
//! evaluates the scalar function 2N times with perturbed constant inputs.
//! Tests compare its output against [`backward`](super::backward) to catch
//! wrong analytic rules.

use crate::error::Result;

use super::Tensor;

/// Central-difference gradient of `f` at `x`: entry i is
/// `(f(x + h*e_i) - f(x - h*e_i)) / (2h)`.
pub fn finite_diff_gradient<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let base = x.data().to_vec();
    let shape = x.shape().to_vec();
    let mut grad = vec![0.0; base.len()];
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + h;
        let up = f(&Tensor::from_vec(probe.clone(), &shape)?)?;
        probe[i] = base[i] - h;
        let down = f(&Tensor::from_vec(probe.clone(), &shape)?)?;
        probe[i] = base[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    Tensor::from_vec(grad, &shape)
}

/// Relative error with an absolute floor: `|a-b| / max(|a|, |b|, 1e-8)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()).max(1e-8))
}

/// Worst relative error over two equally long slices.
pub fn max_rel_err(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "gradient length mismatch");
    xs.iter().zip(ys).map(|(&a, &b)| rel_err(a, b)).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_known_quadratic() {
        // f(x) = sum(x^2), df/dx = 2x
        let x = Tensor::from_vec(vec![1.0, -2.0, 0.5], &[3]).unwrap();
        let g = finite_diff_gradient(|t| Ok(t.mul(t)?.sum().item()), &x, 1e-4).unwrap();
        let want = [2.0, -4.0, 1.0];
        assert!(max_rel_err(g.data(), &want) < 1e-7);
    }

    #[test]
    fn rel_err_floor_handles_tiny_values() {
        assert!(rel_err(0.0, 1e-12) < 1e-3);
        assert!(rel_err(1.0, 2.0) == 0.5);
    }
}
