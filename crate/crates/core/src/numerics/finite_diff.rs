use super::tensor::{Real, Tensor};

/// Magnitude below which gradient entries are compared absolutely rather than relatively.
pub const REL_ERR_FLOOR: Real = 1e-3;

/// Central-difference estimate of the gradient of `f` at `x`.
pub fn finite_difference_grad(mut f: impl FnMut(&Tensor) -> Real, x: &Tensor, eps: Real) -> Tensor {
    assert!(eps > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    grad
}

/// Max over entries of `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`; NaN anywhere yields NaN.
pub fn relative_error(a: &Tensor, b: &Tensor) -> Real {
    assert_eq!(a.shape(), b.shape(), "relative_error on mismatched shapes");
    let mut worst: Real = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        let e = (x - y).abs() / x.abs().max(y.abs()).max(REL_ERR_FLOOR);
        if e.is_nan() {
            return Real::NAN;
        }
        worst = worst.max(e);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let g = finite_difference_grad(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-5);
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
        assert!((g.data()[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::from_vec(vec![0.3, -1.0, 7.0]);
        let g = finite_difference_grad(|_| 42.0, &x, 1e-5);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nan_propagates_into_error() {
        let a = Tensor::from_vec(vec![Real::NAN]);
        let b = Tensor::from_vec(vec![1.0]);
        assert!(relative_error(&a, &b).is_nan());
    }
}
