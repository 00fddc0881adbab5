use super::{DenoiserFn, FlowMap};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::targets::GmmTarget;

/// Exact denoiser and probability-flow map of `N(mean, variance I)`.
///
/// With `p_t = N(mean, (variance + t^2) I)` the flow from `t` to `s` is
/// `mean + (x - mean) sqrt((variance + s^2) / (variance + t^2))`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianFlow {
    pub mean: Vec<f64>,
    pub variance: f64,
}

impl GaussianFlow {
    pub fn new(mean: Vec<f64>, variance: f64) -> Result<Self> {
        if !(variance > 0.0) || mean.is_empty() {
            return Err(Error::Config("gaussian flow needs variance > 0 and dim >= 1".into()));
        }
        Ok(Self { mean, variance })
    }

    pub fn from_target(g: &GmmTarget) -> Result<Self> {
        if g.weights().len() != 1 {
            return Err(Error::Capability("closed-form flow needs a single component".into()));
        }
        Self::new(g.means()[0].clone(), g.component_variance())
    }

    pub fn flow_factor(&self, t: f64, s: f64) -> f64 {
        ((self.variance + s * s) / (self.variance + t * t)).sqrt()
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.mean.len() {
            return Err(Error::Shape(format!(
                "expected {} columns, got {}",
                self.mean.len(),
                x.cols()
            )));
        }
        Ok(())
    }

    fn affine(&self, x: &Tensor, a: f64, b: f64) -> Tensor {
        let mut out = x.clone();
        let d = self.mean.len();
        for row in out.data_mut().chunks_mut(d) {
            for (v, m) in row.iter_mut().zip(&self.mean) {
                *v = a * *v + b * m;
            }
        }
        out
    }
}

impl DenoiserFn for GaussianFlow {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn denoise(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self.check(x)?;
        let vt = self.variance + t * t;
        Ok(self.affine(x, self.variance / vt, t * t / vt))
    }

    fn denoise_rows(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        self.check(x)?;
        super::check_rows(x, t)?;
        let mut out = x.clone();
        for (i, &ti) in t.iter().enumerate() {
            let vt = self.variance + ti * ti;
            for (v, m) in out.row_mut(i).iter_mut().zip(&self.mean) {
                *v = (self.variance * *v + ti * ti * m) / vt;
            }
        }
        Ok(out)
    }
}

impl FlowMap for GaussianFlow {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn traverse(&self, x: &Tensor, t: f64, s: f64) -> Result<Tensor> {
        self.check(x)?;
        if s == t {
            return Ok(x.clone());
        }
        let r = self.flow_factor(t, s);
        Ok(self.affine(x, r, 1.0 - r))
    }

    fn traverse_var<'t>(&self, tape: &'t Tape, x: Var<'t>, t: Var<'t>, s: Var<'t>) -> Result<Var<'t>> {
        let r = ((s.square() + self.variance) / (t.square() + self.variance)).sqrt();
        let mu = tape.constant(Tensor::row_vector(self.mean.clone()));
        Ok(mu + (x - mu) * r)
    }
}

/// Posterior-mean denoiser of a Gaussian mixture, the ideal denoiser for
/// that target.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmDenoiser {
    pub target: GmmTarget,
}

impl DenoiserFn for GmmDenoiser {
    fn dim(&self) -> usize {
        self.target.dim()
    }

    fn denoise(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        if x.cols() != self.target.dim() {
            return Err(Error::Shape(format!(
                "expected {} columns, got {}",
                self.target.dim(),
                x.cols()
            )));
        }
        Ok(self.target.posterior_mean_batch(x, t))
    }

    fn denoise_rows(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        super::check_rows(x, t)?;
        if x.cols() != self.target.dim() {
            return Err(Error::Shape(format!("expected {} columns, got {}", self.target.dim(), x.cols())));
        }
        let mut out = Tensor::zeros(&[x.rows(), x.cols()]);
        let mut resp = Vec::new();
        for (i, &ti) in t.iter().enumerate() {
            self.target.posterior_mean_into(x.row(i), ti, &mut resp, out.row_mut(i));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::score_from_denoiser;
    use crate::numerics::RandomStream;

    #[test]
    fn gaussian_score_closed_form() {
        let f = GaussianFlow::new(vec![1.0, -2.0], 0.5).unwrap();
        let x = Tensor::matrix(1, 2, vec![0.3, 0.4]);
        let t = 0.8;
        let s = score_from_denoiser(&f, &x, t).unwrap();
        for k in 0..2 {
            let want = -(x.data()[k] - f.mean[k]) / (0.5 + t * t);
            assert!((s.data()[k] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn ideal_trajectory_parameterization_reproduces_flow() {
        // Zero-mean unit Gaussian: choose g so the CTM form hits the flow.
        let f = GaussianFlow::new(vec![0.0], 1.0).unwrap();
        let (t, s) = (7.0f64, 0.3f64);
        let x = 2.5f64;
        let flow = x * ((1.0 + s * s) / (1.0 + t * t)).sqrt();
        let g = (flow - s / t * x) / (1.0 - s / t);
        let ctm = s / t * x + (1.0 - s / t) * g;
        assert!((ctm - flow).abs() < 1e-12);
        let y = f.traverse(&Tensor::scalar(x), t, s).unwrap().item();
        assert!((y - flow).abs() < 1e-14);
    }

    #[test]
    fn flow_pushes_marginals_forward() {
        let f = GaussianFlow::new(vec![0.0, 0.0], 0.25).unwrap();
        let mut rng = RandomStream::new(0, 0);
        let t = 3.0;
        let x = rng.normal_tensor(50_000, 2).scale((0.25f64 + t * t).sqrt());
        let y = f.traverse(&x, t, 0.1).unwrap();
        for v in y.column_variances() {
            assert!((v / (0.25 + 0.01) - 1.0).abs() < 0.03);
        }
    }

    #[test]
    fn gmm_denoiser_matches_gaussian_case() {
        let g = GmmTarget::gaussian(vec![1.0, 2.0], 0.7).unwrap();
        let a = GmmDenoiser { target: g.clone() };
        let b = GaussianFlow::from_target(&g).unwrap();
        let x = RandomStream::new(1, 0).normal_tensor(10, 2);
        let da = a.denoise(&x, 1.3).unwrap();
        let db = b.denoise(&x, 1.3).unwrap();
        assert!(da.max_abs_diff(&db) < 1e-13);
    }
}
