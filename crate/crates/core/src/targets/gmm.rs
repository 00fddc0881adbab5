use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, RandomStream, Tensor};

/// Gaussian mixture with a shared isotropic component variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmTarget {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    component_variance: f64,
}

/// Seed used for the default mixture means.
pub const DEFAULT_GMM_SEED: u64 = 20_240_611;

impl GmmTarget {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, component_variance: f64) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() {
            return Err(Error::Config(format!(
                "{} weights for {} means",
                weights.len(),
                means.len()
            )));
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::Config("mixture weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("mixture weights sum to {total}")));
        }
        let d = means[0].len();
        if d == 0 || means.iter().any(|m| m.len() != d || m.iter().any(|v| !v.is_finite())) {
            return Err(Error::Config("means must be finite vectors of equal length".into()));
        }
        if !(component_variance >= 0.0) || !component_variance.is_finite() {
            return Err(Error::Config(format!("component variance {component_variance}")));
        }
        Ok(Self {
            weights,
            means,
            component_variance,
        })
    }

    /// Single isotropic Gaussian `N(mean, variance I)`.
    pub fn gaussian(mean: Vec<f64>, variance: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], variance)
    }

    /// Equal-weight mixture with means drawn uniformly from
    /// `[-half_width, half_width]^dim`.
    pub fn uniform_means(
        n_components: usize,
        dim: usize,
        half_width: f64,
        component_variance: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = RandomStream::new(seed, 0);
        let means = (0..n_components)
            .map(|_| {
                (0..dim)
                    .map(|_| (2.0 * rng.uniform() - 1.0) * half_width)
                    .collect()
            })
            .collect();
        Self::new(
            vec![1.0 / n_components as f64; n_components],
            means,
            component_variance,
        )
    }

    /// The 40-component benchmark mixture: means in `[-40, 40]^dim`, unit
    /// component variance.
    pub fn gmm40(dim: usize) -> Self {
        Self::uniform_means(40, dim, 40.0, 1.0, DEFAULT_GMM_SEED).expect("valid defaults")
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn component_variance(&self) -> f64 {
        self.component_variance
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!(
                "expected {} coordinates, got {}",
                self.dim(),
                x.len()
            )));
        }
        Ok(())
    }

    /// Log-density of the mixture convolved with `N(0, t^2 I)`.
    pub fn noised_log_density(&self, x: &[f64], t: f64) -> Result<f64> {
        self.check_dim(x)?;
        let v = self.component_variance + t * t;
        if !(v > 0.0) {
            return Err(Error::Domain("degenerate mixture evaluated at t = 0".into()));
        }
        let d = self.dim() as f64;
        let norm = -0.5 * d * (2.0 * PI * v).ln();
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .map(|(w, m)| w.ln() + norm - sq_dist(x, m) / (2.0 * v))
            .collect();
        log_sum_exp(&terms)
    }

    /// Exact (normalized) mixture log-density.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.noised_log_density(x, 0.0)
    }

    /// Posterior component probabilities of the noised mixture at `x`.
    fn responsibilities(&self, x: &[f64], v: f64, out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .iter()
                .zip(&self.means)
                .map(|(w, m)| w.ln() - sq_dist(x, m) / (2.0 * v)),
        );
        let mx = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for r in out.iter_mut() {
            *r = (*r - mx).exp();
            s += *r;
        }
        out.iter_mut().for_each(|r| *r /= s);
    }

    /// `E[x_0 | x_t = x]` for `x_t = x_0 + t z`, written into `out`.
    pub fn posterior_mean_into(&self, x: &[f64], t: f64, resp: &mut Vec<f64>, out: &mut [f64]) {
        let v = self.component_variance;
        let vt = v + t * t;
        self.responsibilities(x, vt, resp);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (r, m) in resp.iter().zip(&self.means) {
            for ((o, xi), mi) in out.iter_mut().zip(x).zip(m) {
                *o += r * (v * xi + t * t * mi) / vt;
            }
        }
    }

    /// Exact score of the noised mixture, `grad_x log p_t(x)`.
    pub fn noised_score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        if !(t > 0.0) {
            return Err(Error::Domain(format!("t must be positive, got {t}")));
        }
        let vt = self.component_variance + t * t;
        let mut resp = Vec::with_capacity(self.weights.len());
        self.responsibilities(x, vt, &mut resp);
        let mut s = vec![0.0; x.len()];
        for (r, m) in resp.iter().zip(&self.means) {
            for ((o, xi), mi) in s.iter_mut().zip(x).zip(m) {
                *o += r * (mi - xi) / vt;
            }
        }
        Ok(s)
    }

    /// Batched posterior-mean denoiser at a single time.
    pub fn posterior_mean_batch(&self, x: &Tensor, t: f64) -> Tensor {
        let mut out = Tensor::zeros(&[x.rows(), x.cols()]);
        let mut resp = Vec::with_capacity(self.weights.len());
        for i in 0..x.rows() {
            let (src, dst) = (x.row(i).to_vec(), out.row_mut(i));
            self.posterior_mean_into(&src, t, &mut resp, dst);
        }
        out
    }

    pub fn sample_one(&self, rng: &mut RandomStream, out: &mut [f64]) {
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let sd = self.component_variance.sqrt();
        for (o, m) in out.iter_mut().zip(&self.means[k]) {
            *o = m + sd * rng.normal();
        }
    }

    /// I.i.d. draws: categorical component, then Gaussian.
    pub fn sample_exact(&self, n: usize, rng: &mut RandomStream) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::Domain("sample_exact needs n >= 1".into()));
        }
        let d = self.dim();
        let mut out = Tensor::zeros(&[n, d]);
        for i in 0..n {
            self.sample_one(rng, out.row_mut(i));
        }
        Ok(out)
    }

    /// Index of the closest mean.
    pub fn nearest_component(&self, x: &[f64]) -> usize {
        self.means
            .iter()
            .enumerate()
            .map(|(i, m)| (i, sq_dist(x, m)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }

    /// Mixture mean and per-coordinate variance.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let mut mean = vec![0.0; d];
        for (w, m) in self.weights.iter().zip(&self.means) {
            for (a, v) in mean.iter_mut().zip(m) {
                *a += w * v;
            }
        }
        let mut var = vec![self.component_variance; d];
        for (w, m) in self.weights.iter().zip(&self.means) {
            for ((a, v), mu) in var.iter_mut().zip(m).zip(&mean) {
                *a += w * (v - mu) * (v - mu);
            }
        }
        (mean, var)
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gaussian_log_density_slice;

    fn three_component() -> GmmTarget {
        GmmTarget::new(
            vec![0.2, 0.5, 0.3],
            vec![vec![-1.0, 0.5], vec![2.0, 1.0], vec![0.0, -3.0]],
            0.7,
        )
        .unwrap()
    }

    #[test]
    fn single_component_at_mean() {
        let g = GmmTarget::gaussian(vec![1.0, -2.0, 0.5], 2.0).unwrap();
        let v = g.log_density(&[1.0, -2.0, 0.5]).unwrap();
        assert!((v + 1.5 * (2.0 * PI * 2.0).ln()).abs() < 1e-13);
    }

    #[test]
    fn symmetric_pair_midpoint() {
        let g = GmmTarget::new(vec![0.5, 0.5], vec![vec![-2.0], vec![2.0]], 1.0).unwrap();
        let a = gaussian_log_density_slice(&[0.0], &[-2.0], 1.0, 1).unwrap().exp();
        let b = gaussian_log_density_slice(&[0.0], &[2.0], 1.0, 1).unwrap().exp();
        let v = g.log_density(&[0.0]).unwrap();
        assert!((v - (0.5 * (a + b)).ln()).abs() < 1e-14);
    }

    #[test]
    fn bad_weights_rejected() {
        assert!(GmmTarget::new(vec![0.5, 0.4], vec![vec![0.0], vec![1.0]], 1.0).is_err());
        assert!(GmmTarget::new(vec![], vec![], 1.0).is_err());
        assert!(three_component().log_density(&[1.0]).is_err());
    }

    #[test]
    fn gaussian_score() {
        let g = GmmTarget::gaussian(vec![1.0, -1.0], 0.5).unwrap();
        let s = g.noised_score(&[2.0, 0.0], 0.3).unwrap();
        let vt = 0.5 + 0.09;
        assert!((s[0] + 1.0 / vt).abs() < 1e-14);
        assert!((s[1] + 1.0 / vt).abs() < 1e-14);
    }

    #[test]
    fn symmetric_pair_score_on_axis() {
        let g = GmmTarget::new(vec![0.5, 0.5], vec![vec![-2.0, 0.0], vec![2.0, 0.0]], 1.0).unwrap();
        // On the mirror line x=0 the x-component cancels.
        let s = g.noised_score(&[0.0, 1.3], 0.5).unwrap();
        assert!(s[0].abs() < 1e-15);
        assert!((s[1] + 1.3 / 1.25).abs() < 1e-14);
    }

    #[test]
    fn score_matches_finite_differences() {
        let g = three_component();
        let mut rng = RandomStream::new(5, 0);
        for &t in &[0.05, 0.5, 3.0] {
            for _ in 0..20 {
                let x = [2.0 * rng.normal(), 2.0 * rng.normal()];
                let s = g.noised_score(&x, t).unwrap();
                for k in 0..2 {
                    let h = 1e-5;
                    let mut p = x;
                    p[k] += h;
                    let mut m = x;
                    m[k] -= h;
                    let fd = (g.noised_log_density(&p, t).unwrap()
                        - g.noised_log_density(&m, t).unwrap())
                        / (2.0 * h);
                    assert!((fd - s[k]).abs() < 1e-6 * (1.0 + s[k].abs()), "{fd} vs {}", s[k]);
                }
            }
        }
    }

    #[test]
    fn score_near_eps_approaches_clean_gradient() {
        let g = GmmTarget::gmm40(2);
        let mut rng = RandomStream::new(9, 0);
        let x = g.sample_exact(50, &mut rng).unwrap();
        for r in x.rows_iter() {
            let s = g.noised_score(r, crate::EPS).unwrap();
            let h = 1e-6;
            for k in 0..2 {
                let mut p = r.to_vec();
                p[k] += h;
                let mut m = r.to_vec();
                m[k] -= h;
                let fd = (g.log_density(&p).unwrap() - g.log_density(&m).unwrap()) / (2.0 * h);
                assert!((fd - s[k]).abs() <= 1e-3 * fd.abs().max(1e-2));
            }
        }
    }

    #[test]
    fn denoiser_score_identity() {
        let g = three_component();
        let x = [0.4, -0.9];
        let t = 1.7;
        let mut resp = Vec::new();
        let mut d = [0.0; 2];
        g.posterior_mean_into(&x, t, &mut resp, &mut d);
        let s = g.noised_score(&x, t).unwrap();
        for k in 0..2 {
            assert!((d[k] - (x[k] + t * t * s[k])).abs() < 1e-13);
        }
    }

    #[test]
    fn sample_mean_within_clt_bound() {
        let g = GmmTarget::gaussian(vec![0.0, 0.0], 2.0).unwrap();
        let mut rng = RandomStream::new(3, 1);
        let n = 20_000;
        let x = g.sample_exact(n, &mut rng).unwrap();
        for m in x.column_means() {
            assert!(m.abs() < 4.0 * (2.0 / n as f64).sqrt());
        }
    }

    #[test]
    fn zero_variance_samples_sit_on_means() {
        let g = GmmTarget::new(vec![0.5, 0.5], vec![vec![1.0, 2.0], vec![-3.0, 4.0]], 0.0).unwrap();
        let mut rng = RandomStream::new(3, 1);
        let x = g.sample_exact(100, &mut rng).unwrap();
        for r in x.rows_iter() {
            assert!(g.means().iter().any(|m| m.as_slice() == r));
        }
    }

    #[test]
    fn component_frequencies_within_multinomial_bounds() {
        let g = GmmTarget::new(
            vec![0.1, 0.2, 0.3, 0.4],
            vec![vec![-30.0], vec![-10.0], vec![10.0], vec![30.0]],
            1.0,
        )
        .unwrap();
        let mut rng = RandomStream::new(11, 0);
        let n = 40_000;
        let x = g.sample_exact(n, &mut rng).unwrap();
        let mut counts = [0usize; 4];
        for r in x.rows_iter() {
            counts[g.nearest_component(r)] += 1;
        }
        for (c, w) in counts.iter().zip(g.weights()) {
            let sd = (n as f64 * w * (1.0 - w)).sqrt();
            assert!((*c as f64 - n as f64 * w).abs() < 4.0 * sd);
        }
    }
}
