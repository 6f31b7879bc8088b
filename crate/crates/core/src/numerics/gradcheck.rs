use super::NdArray;
use crate::error::{Error, Result};

/// Central-difference estimate of the gradient of a scalar function.
pub fn finite_difference_grad<F>(f: F, x: &NdArray, eps: f64) -> Result<NdArray>
where
    F: Fn(&NdArray) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("step size must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = NdArray::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::numeric(format!("function is non-finite near coordinate {i}")));
        }
        grad.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    Ok(grad)
}

/// ‖a − b‖ / max(‖a‖, ‖b‖); zero when both vanish.
pub fn relative_error(a: &NdArray, b: &NdArray) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let diff = a.zip_map(b, |x, y| x - y).sq_norm().sqrt();
    let scale = a.sq_norm().sqrt().max(b.sq_norm().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
