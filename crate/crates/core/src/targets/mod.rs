//! Analytic target densities, reference samplers and test functions.

mod dw;
mod gmm;
mod mcmc;
mod particles;
mod test_fn;

pub use dw::DwTarget;
pub use gmm::{GmmTarget, DEFAULT_GMM_SEED};
pub use mcmc::{acceptance_probability, mcmc_reference, McmcConfig, McmcOutput};
pub use particles::{project_zero_cog, ParticleLayout};
pub use test_fn::{eval_test_function, TestFunction};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RandomStream, Tensor};

/// A target distribution known up to its normalizer.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Gmm(GmmTarget),
    DoubleWell(DwTarget),
}

impl Target {
    pub fn dim(&self) -> usize {
        match self {
            Target::Gmm(g) => g.dim(),
            Target::DoubleWell(d) => d.dim(),
        }
    }

    pub fn layout(&self) -> Option<ParticleLayout> {
        match self {
            Target::Gmm(_) => None,
            Target::DoubleWell(d) => Some(d.layout()),
        }
    }

    /// Dimension used in Gaussian normalizers.
    pub fn density_dim(&self) -> usize {
        self.layout().map_or(self.dim(), |l| l.subspace_dim())
    }

    pub fn as_gmm(&self) -> Option<&GmmTarget> {
        match self {
            Target::Gmm(g) => Some(g),
            Target::DoubleWell(_) => None,
        }
    }

    /// `log π̄(x)`; particle configurations are projected first.
    pub fn unnorm_log_density(&self, x: &[f64]) -> Result<f64> {
        match self {
            Target::Gmm(g) => g.log_density(x),
            Target::DoubleWell(d) => {
                if x.len() != d.dim() {
                    return Err(Error::Shape(format!(
                        "expected {} coordinates, got {}",
                        d.dim(),
                        x.len()
                    )));
                }
                d.unnorm_log_density(&project_zero_cog(d.layout(), x))
            }
        }
    }

    pub fn log_density_rows(&self, x: &Tensor) -> Result<Vec<f64>> {
        x.rows_iter().map(|r| self.unnorm_log_density(r)).collect()
    }

    /// Projects rows onto the zero-CoG subspace when the target has particles.
    pub fn project(&self, x: &mut Tensor) {
        if let Some(l) = self.layout() {
            l.project_rows(x);
        }
    }

    pub fn has_exact_sampler(&self) -> bool {
        matches!(self, Target::Gmm(_))
    }

    pub fn sample_exact(&self, n: usize, rng: &mut RandomStream) -> Result<Tensor> {
        match self {
            Target::Gmm(g) => g.sample_exact(n, rng),
            Target::DoubleWell(_) => Err(Error::Capability(
                "double-well target has no exact sampler; use mcmc_reference".into(),
            )),
        }
    }
}

/// Source of exact or reservoir samples from the target.
#[derive(Clone, Debug)]
pub enum TargetSampler {
    Exact(Target),
    /// Fixed reservoir, resampled with replacement.
    Bank(Tensor),
}

impl TargetSampler {
    pub fn draw(&self, m: usize, rng: &mut RandomStream) -> Result<Tensor> {
        match self {
            TargetSampler::Exact(t) => t.sample_exact(m, rng),
            TargetSampler::Bank(b) => {
                if b.rows() == 0 {
                    return Err(Error::Config("empty sample bank".into()));
                }
                let idx: Vec<usize> = (0..m).map(|_| rng.below(b.rows())).collect();
                Ok(b.select_rows(&idx))
            }
        }
    }
}

fn default_components() -> usize {
    40
}

fn default_half_width() -> f64 {
    40.0
}

fn default_seed() -> u64 {
    DEFAULT_GMM_SEED
}

fn one() -> f64 {
    1.0
}

/// Human-readable target description used in config files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetSpec {
    /// Equal-weight mixture with uniformly drawn means.
    GmmUniform {
        dim: usize,
        #[serde(default = "default_components")]
        n_components: usize,
        #[serde(default = "default_half_width")]
        half_width: f64,
        #[serde(default = "one")]
        component_variance: f64,
        #[serde(default = "default_seed")]
        seed: u64,
    },
    Gaussian {
        dim: usize,
        #[serde(default = "one")]
        variance: f64,
        #[serde(default)]
        mean: Option<Vec<f64>>,
    },
    Mixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        component_variance: f64,
    },
    DoubleWell(DwTarget),
}

impl TargetSpec {
    pub fn gmm40(dim: usize) -> Self {
        TargetSpec::GmmUniform {
            dim,
            n_components: 40,
            half_width: 40.0,
            component_variance: 1.0,
            seed: DEFAULT_GMM_SEED,
        }
    }

    pub fn build(&self) -> Result<Target> {
        Ok(match self {
            TargetSpec::GmmUniform {
                dim,
                n_components,
                half_width,
                component_variance,
                seed,
            } => Target::Gmm(GmmTarget::uniform_means(
                *n_components,
                *dim,
                *half_width,
                *component_variance,
                *seed,
            )?),
            TargetSpec::Gaussian {
                dim,
                variance,
                mean,
            } => {
                let m = mean.clone().unwrap_or_else(|| vec![0.0; *dim]);
                if m.len() != *dim {
                    return Err(Error::Config(format!("mean has {} entries, dim {dim}", m.len())));
                }
                Target::Gmm(GmmTarget::gaussian(m, *variance)?)
            }
            TargetSpec::Mixture {
                weights,
                means,
                component_variance,
            } => Target::Gmm(GmmTarget::new(weights.clone(), means.clone(), *component_variance)?),
            TargetSpec::DoubleWell(d) => {
                d.validate()?;
                Target::DoubleWell(d.clone())
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::mean_and_se;

    #[test]
    fn spec_round_trips_through_toml() {
        let specs = [
            TargetSpec::gmm40(2),
            TargetSpec::Gaussian {
                dim: 3,
                variance: 0.25,
                mean: None,
            },
            TargetSpec::DoubleWell(DwTarget::default()),
        ];
        for s in specs {
            let text = toml::to_string(&s).unwrap();
            let back: TargetSpec = toml::from_str(&text).unwrap();
            assert_eq!(s, back);
        }
        let s: TargetSpec = toml::from_str("kind = \"gmm_uniform\"\ndim = 2\n").unwrap();
        assert_eq!(s, TargetSpec::gmm40(2));
    }

    #[test]
    fn double_well_density_uses_subspace() {
        let t = TargetSpec::DoubleWell(DwTarget::default()).build().unwrap();
        assert_eq!(t.dim(), 8);
        assert_eq!(t.density_dim(), 6);
        assert!(t.sample_exact(1, &mut RandomStream::new(0, 0)).is_err());
        let d = DwTarget::default();
        let mut x = d.rest_configuration();
        let base = t.unnorm_log_density(&x).unwrap();
        x.iter_mut().for_each(|v| *v += 3.0);
        assert!((t.unnorm_log_density(&x).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn gmm40_log_norm_matches_high_n_oracle() {
        // Independent oracle: a large exact-sampler batch on a separate stream.
        let t = TargetSpec::gmm40(2).build().unwrap();
        let eval = |seed, n| {
            let x = t.sample_exact(n, &mut RandomStream::new(seed, 7)).unwrap();
            let v = eval_test_function(TestFunction::LogL2Norm, &x).unwrap();
            mean_and_se(&v)
        };
        let (oracle, se_o) = eval(100, 1_000_000);
        let (est, se) = eval(101, 20_000);
        assert!((est - oracle).abs() < 3.0 * (se * se + se_o * se_o).sqrt());
    }
}
