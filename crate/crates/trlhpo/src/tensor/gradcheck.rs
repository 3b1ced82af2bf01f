//! Central finite differences, used as the independent oracle for every
//! analytic gradient in the crate.

use super::Tensor;

/// Central-difference gradient estimate of a scalar function:
/// `(f(x + eps*e_i) - f(x - eps*e_i)) / (2*eps)` per coordinate.
///
/// Deliberately ignorant of the tape: `f` is a black box.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    assert!(eps > 0.0, "finite_diff_grad requires eps > 0");
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad[i] = (up - down) / (2.0 * eps);
    }
    Tensor::new(x.shape().to_vec(), grad).expect("gradient matches input shape")
}

/// Agreement check used by the gradient-fidelity tests:
/// `|a - b| <= atol + rtol * max(|a|, |b|)` elementwise.
pub fn grads_close(analytic: &Tensor, numeric: &Tensor, rtol: f64, atol: f64) -> bool {
    analytic.shape() == numeric.shape()
        && analytic
            .data()
            .iter()
            .zip(numeric.data())
            .all(|(&a, &b)| (a - b).abs() <= atol + rtol * a.abs().max(b.abs()))
}
