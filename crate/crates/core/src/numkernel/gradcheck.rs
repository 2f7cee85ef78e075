use super::{Scalar, Tensor};

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn finite_diff_grad<S: Scalar>(f: impl Fn(&Tensor<S>) -> S, x: &Tensor<S>, h: S) -> Tensor<S> {
    let two_h = h + h;
    let mut probe = x.clone();
    let grad = (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = f(&probe);
            probe.data_mut()[i] = orig - h;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / two_h
        })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), grad)
}

/// Largest elementwise relative error `|a - b| / max(|a|, |b|, floor)`.
///
/// `floor` keeps entries that are zero analytically from dividing the
/// finite-difference round-off by a vanishing magnitude.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Normwise relative error `max|a - b| / max(max|a|, max|b|, floor)`.
///
/// Central differences at step `h` carry absolute round-off of roughly
/// `eps * |f| / h`, so entries far below the gradient's own scale cannot be
/// resolved elementwise; this measures the error against that scale.
pub fn max_scaled_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = a
        .iter()
        .chain(b)
        .fold(floor, |m, &v| m.max(v.abs()));
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs())
        .fold(0.0, f64::max)
        / scale
}
