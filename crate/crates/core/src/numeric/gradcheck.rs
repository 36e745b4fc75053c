use super::{ParamId, ParamStore};
use crate::exec::Execution;

/// Central-difference estimate of `∂f/∂p_i` for every coordinate of `point`.
pub fn finite_difference_gradient<F>(f: F, point: &[f64], eps: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut p = point.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + eps;
            let plus = f(&p);
            p[i] = orig - eps;
            let minus = f(&p);
            p[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// Central differences of `f` with respect to one parameter of a store.
/// Coordinates are evaluated independently through `exec`.
pub fn finite_difference_param<F>(
    f: F,
    params: &ParamStore,
    id: ParamId,
    eps: f64,
    exec: Execution,
) -> Vec<f64>
where
    F: Fn(&ParamStore) -> f64 + Sync + Send,
{
    let n = params.get(id).len();
    exec.map_range(n, |i| {
        let mut q = params.clone();
        let orig = q.get(id).data()[i];
        q.get_mut(id).data_mut()[i] = orig + eps;
        let plus = f(&q);
        q.get_mut(id).data_mut()[i] = orig - eps;
        let minus = f(&q);
        (plus - minus) / (2.0 * eps)
    })
}

/// Norms below this are compared absolutely. Some gradients are zero by
/// construction (e.g. attention key biases), where central differences
/// return pure rounding noise.
pub const GRADIENT_NORM_FLOOR: f64 = 1e-5;

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, GRADIENT_NORM_FLOOR)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(GRADIENT_NORM_FLOOR)
}
