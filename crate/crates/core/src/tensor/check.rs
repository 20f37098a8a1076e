use super::Tensor;

/// Central-difference gradient of a scalar function:
/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Relative error `|a − b| / max(|a|, |b|, floor)`. The floor keeps
/// vanishing gradients from turning rounding noise into large ratios.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let g = finite_diff_grad(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-5);
        for (got, want) in g.data().iter().zip([2.0, 4.0, 6.0]) {
            assert!((got - want).abs() < 1e-8, "{got} vs {want}");
        }
    }

    #[test]
    fn sine_gradient_at_zero() {
        let x = Tensor::vector(vec![0.0]);
        let g = finite_diff_grad(|t| t.data().iter().map(|v| v.sin()).sum(), &x, 1e-5);
        assert!((g.data()[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(2.0, 1.0, 1e-8), 0.5);
        assert!(relative_error(1e-12, 2e-12, 1e-6) < 1e-5);
    }
}
