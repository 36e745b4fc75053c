use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `ln Σ exp(s_i)` with a max shift. Entries may be `-inf` but not all of them.
pub fn logsumexp(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("logsumexp"));
    }
    if scores.iter().any(|s| s.is_nan() || *s == f64::INFINITY) {
        return Err(Error::InvalidValue(
            "logsumexp: entries must be finite or -inf".into(),
        ));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::InvalidValue("logsumexp: all entries are -inf".into()));
    }
    if scores.len() == 1 {
        return Ok(max);
    }
    let sum: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Unchecked variant for internal dynamic programs; returns `-inf` when every
/// entry is `-inf`.
pub(crate) fn logsumexp_unchecked(scores: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = scores.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + scores.map(|s| (s - max).exp()).sum::<f64>().ln()
}

pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("softmax"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidValue("softmax: non-finite entry".into()));
    }
    let mut out = scores.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Normalizes with the population variance, then applies `gamma`/`beta`.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::EmptyInput("layer_norm"));
    }
    if x.len() != gamma.len() || x.len() != beta.len() {
        return Err(Error::shape(
            "layer_norm",
            format!("x={}, gamma={}, beta={}", x.len(), gamma.len(), beta.len()),
        ));
    }
    if eps < 0.0 || !eps.is_finite() {
        return Err(Error::InvalidValue(format!("layer_norm: eps={eps}")));
    }
    let (xhat, _) = normalize(x, eps);
    Ok(xhat
        .iter()
        .zip(gamma.iter().zip(beta))
        .map(|(h, (g, b))| h * g + b)
        .collect())
}

/// Returns `(x - mean) * inv_std` and `inv_std`.
pub(crate) fn normalize(x: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    (x.iter().map(|v| (v - mean) * inv_std).collect(), inv_std)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logsumexp_basics() {
        assert!((logsumexp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(logsumexp(&[-3.25]).unwrap(), -3.25);
        assert_eq!(
            logsumexp(&[f64::NEG_INFINITY, 1.5]).unwrap(),
            1.5
        );
        assert!(logsumexp(&[]).is_err());
        assert!(logsumexp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]).is_err());
        assert!(logsumexp(&[f64::NAN]).is_err());
    }

    #[test]
    fn logsumexp_is_stable_for_large_inputs() {
        let v = logsumexp(&[1000.0, 1000.0]).unwrap();
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn softmax_analytic_cases() {
        let u = softmax(&[4.0, 4.0, 4.0]).unwrap();
        for p in u {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&[0.0, 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15);
        assert!((p[1] - 0.75).abs() < 1e-15);
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let y = layer_norm(&[2.5, 2.5], &[1.0, 1.0], &[0.0, 0.0], LAYER_NORM_EPS).unwrap();
        assert!(y.iter().all(|v| v.abs() <= LAYER_NORM_EPS.sqrt()));
        let y = layer_norm(&[1.0, -1.0], &[1.0, 1.0], &[0.0, 0.0], 0.0).unwrap();
        assert_eq!(y, vec![1.0, -1.0]);
        assert!(layer_norm(&[1.0, 2.0], &[1.0], &[0.0, 0.0], 1e-5).is_err());
    }
}
