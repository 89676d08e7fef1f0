//! Central finite-difference gradient verification.

use crate::autodiff::tensor::Tensor;

/// Relative error with a floor so that near-zero gradients are compared
/// absolutely (finite differences carry ~1e-9 absolute noise at h = 1e-6).
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

/// Max relative error between `analytic` gradients and central differences
/// of `eval` over every coordinate of every parameter.
///
/// `eval` must recompute the scalar loss from scratch for the given
/// parameter values; `analytic[i]` holds the gradient for `params[i]`.
pub fn central_diff_max_err(
    eval: &mut dyn FnMut(&[Tensor]) -> f64,
    params: &[Tensor],
    analytic: &[Tensor],
    h: f64,
) -> f64 {
    assert_eq!(params.len(), analytic.len());
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        assert_eq!(p.len(), analytic[pi].len(), "gradient shape mismatch");
        for ci in 0..p.len() {
            let orig = p.data()[ci];

            let mut plus = p.data().to_vec();
            plus[ci] = orig + h;
            work[pi] = Tensor::new(p.shape().to_vec(), plus);
            let up = eval(&work);

            let mut minus = p.data().to_vec();
            minus[ci] = orig - h;
            work[pi] = Tensor::new(p.shape().to_vec(), minus);
            let down = eval(&work);

            work[pi] = p.clone();

            let numeric = (up - down) / (2.0 * h);
            let err = rel_err(analytic[pi].data()[ci], numeric);
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}
