use std::f64::consts::PI;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `max(v) + log(sum(exp(v - max(v))))`.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Domain("log_sum_exp of an empty array".into()));
    }
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || m == f64::INFINITY {
        return Ok(m);
    }
    let s: f64 = values.iter().map(|v| (v - m).exp()).sum();
    Ok(m + s.ln())
}

/// Isotropic Gaussian log-density with the dimension taken from `x`.
pub fn gaussian_log_density(x: &Tensor, mean: &Tensor, variance: f64) -> Result<f64> {
    x.check_same_shape(mean)?;
    gaussian_log_density_slice(x.data(), mean.data(), variance, x.len())
}

/// Isotropic Gaussian log-density where the normalizer uses `dim`, which
/// may be smaller than `x.len()` for densities living on a linear subspace.
pub fn gaussian_log_density_slice(x: &[f64], mean: &[f64], variance: f64, dim: usize) -> Result<f64> {
    if !(variance > 0.0) {
        return Err(Error::Domain(format!("non-positive variance {variance}")));
    }
    if x.len() != mean.len() {
        return Err(Error::Shape(format!("{} vs {} entries", x.len(), mean.len())));
    }
    let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(-0.5 * dim as f64 * (2.0 * PI * variance).ln() - sq / (2.0 * variance))
}

/// Mean and standard error of the mean.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (m, 0.0);
    }
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Linear-interpolated quantile of unsorted data, `q` in `[0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// 1-D Wasserstein-1 distance between two empirical samples.
///
/// Both samples are sorted and compared through their quantile functions,
/// which is exact for equal sizes and uses a merged grid otherwise.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> f64 {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    if x.len() == y.len() {
        return x.iter().zip(&y).map(|(p, q)| (p - q).abs()).sum::<f64>() / x.len() as f64;
    }
    let (n, m) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut level = 0.0;
    let mut total = 0.0;
    while i < x.len() && j < y.len() {
        let next_x = (i + 1) as f64 / n;
        let next_y = (j + 1) as f64 / m;
        let next = next_x.min(next_y);
        total += (next - level) * (x[i] - y[j]).abs();
        level = next;
        if next_x <= next {
            i += 1;
        }
        if next_y <= next {
            j += 1;
        }
    }
    total
}
