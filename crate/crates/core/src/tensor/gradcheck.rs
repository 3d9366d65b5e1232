use super::{Real, Tensor};

/// Gradients with magnitude below this are compared on an absolute scale.
pub const GRAD_REL_FLOOR: f64 = 1e-6;

/// Central-difference gradient `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` per element.
pub fn finite_diff_grad<T: Real>(f: impl Fn(&Tensor<T>) -> T, x: &Tensor<T>, h: T) -> Tensor<T> {
    assert!(h > T::zero(), "finite difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (h + h));
    }
    Tensor::new(x.shape().to_vec(), grad).expect("same shape")
}

/// `|a − b| / max(|a|, |b|, GRAD_REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(GRAD_REL_FLOOR);
    (analytic - numeric).abs() / denom
}
