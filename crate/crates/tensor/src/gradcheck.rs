//! Central finite differences, used as an independent oracle for the
//! analytic gradients produced by [`crate::Graph::backward`].
//!
//! Nothing here touches the tape's backward rules: the function under test
//! is only ever evaluated forward.

use crate::Tensor;

/// Numerical gradient of a scalar function with respect to each input.
pub fn numerical_grad<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Vec<Tensor<f64>>
where
    F: Fn(&[Tensor<f64>]) -> f64,
{
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].numel()];
        for (j, slot) in g.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = f(&work);
            work[i].data_mut()[j] = orig - h;
            let minus = f(&work);
            work[i].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        grads.push(Tensor::new(inputs[i].shape().to_vec(), g).expect("same shape"));
    }
    grads
}

/// Largest elementwise relative error `|a-n| / max(|a|, |n|, floor)`.
///
/// The floor keeps entries whose true gradient is zero from dividing by
/// rounding noise.
pub fn max_rel_err(analytic: &Tensor<f64>, numeric: &Tensor<f64>, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
