//! Central finite differences, used to verify analytic gradients.
//!
//! These helpers only ever call the forward closure they are given, so
//! they stay independent of the backward rules they are checking.

use crate::{Float, ParamId, ParamSet};

/// Central differences of `loss` with respect to chosen elements of one parameter.
pub fn param_central_diff<F: Float>(
    params: &mut ParamSet<F>,
    id: ParamId,
    coords: &[usize],
    eps: F,
    mut loss: impl FnMut(&ParamSet<F>) -> F,
) -> Vec<F> {
    let two = F::one() + F::one();
    coords
        .iter()
        .map(|&c| {
            let orig = params.tensor(id).data()[c];
            params.tensor_mut(id).data_mut()[c] = orig + eps;
            let up = loss(params);
            params.tensor_mut(id).data_mut()[c] = orig - eps;
            let down = loss(params);
            params.tensor_mut(id).data_mut()[c] = orig;
            (up - down) / (two * eps)
        })
        .collect()
}

/// Central differences of `loss` with respect to chosen elements of a plain buffer.
pub fn central_diff<F: Float>(x: &mut [F], coords: &[usize], eps: F, mut loss: impl FnMut(&[F]) -> F) -> Vec<F> {
    let two = F::one() + F::one();
    coords
        .iter()
        .map(|&c| {
            let orig = x[c];
            x[c] = orig + eps;
            let up = loss(x);
            x[c] = orig - eps;
            let down = loss(x);
            x[c] = orig;
            (up - down) / (two * eps)
        })
        .collect()
}

/// `||a - n|| / max(||a||, ||n||)` over the checked coordinates; 0 when both vanish.
pub fn relative_error<F: Float>(analytic: &[F], numeric: &[F]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        let (a, n) = (a.to_f64_lossy(), n.to_f64_lossy());
        diff += (a - n) * (a - n);
        na += a * a;
        nn += n * n;
    }
    let scale = na.sqrt().max(nn.sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

/// Evenly spread coordinate sample of at most `max` indices out of `len`.
pub fn spread_coords(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    (0..max).map(|i| i * len / max + (i * 7919) % (len / max).max(1)).collect()
}
