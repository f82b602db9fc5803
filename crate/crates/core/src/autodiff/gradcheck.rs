use super::{AutodiffError, Tensor};

/// Central-difference estimate of the gradient of a scalar function.
///
/// Coordinate `i` of the result is `(f(x + h·e_i) − f(x − h·e_i)) / 2h`.
pub fn finite_difference_gradient<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor, AutodiffError>
where
    F: Fn(&Tensor) -> Result<f64, AutodiffError>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(AutodiffError::Domain(format!("step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(AutodiffError::NonFinite(format!(
                "function value not finite around coordinate {i}"
            )));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// True when `a` and `b` agree within `rel` relative tolerance, or within
/// `abs` absolute tolerance for entries near zero.
pub fn grads_close(a: &[f64], b: &[f64], rel: f64, abs: f64) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            let diff = (x - y).abs();
            diff <= abs || diff <= rel * x.abs().max(y.abs())
        })
}
