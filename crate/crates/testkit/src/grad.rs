//! Central finite differences for gradient checking.

use cityflow_core::tensor::Tensor;

/// Central-difference gradient of `f` at `x`: element i is
/// `(f(x + h e_i) - f(x - h e_i)) / (2h)`.
pub fn central_diff(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut grad = vec![0.0; x.len()];
    for (i, slot) in grad.iter_mut().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        *slot = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad).expect("shape preserved")
}

/// Maximum elementwise relative error `|a - b| / (|a| + 1e-8)`.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / (a.abs() + 1e-8))
        .fold(0.0, f64::max)
}
