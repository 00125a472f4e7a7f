//! Central finite differences, used to validate reverse-mode gradients.

use crate::tensor::Tensor;

/// Central-difference gradient of `f` at `at`, one coordinate at a time.
pub fn numerical_gradient(mut f: impl FnMut(&Tensor) -> f64, at: &Tensor, step: f64) -> Tensor {
    let mut probe = at.clone();
    let mut grad = Tensor::zeros(at.shape());
    for i in 0..at.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Central-difference derivative along selected coordinates only.
pub fn numerical_partials(mut f: impl FnMut(&Tensor) -> f64, at: &Tensor, coords: &[usize], step: f64) -> Vec<f64> {
    let mut probe = at.clone();
    coords
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + step;
            let plus = f(&probe);
            probe.data_mut()[i] = orig - step;
            let minus = f(&probe);
            probe.data_mut()[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
