use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dw::DwTarget;
use crate::error::{Error, Result};
use crate::numerics::{RandomStream, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub step_size: f64,
    pub burn_in: usize,
    pub thinning: usize,
    pub n_chains: usize,
    pub target_acceptance: f64,
    /// Std of the Gaussian perturbation applied to the rest configuration.
    pub init_noise: f64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            step_size: 0.5,
            burn_in: 2000,
            thinning: 10,
            n_chains: 64,
            target_acceptance: 0.4,
            init_noise: 0.5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct McmcOutput {
    pub samples: Tensor,
    /// Post-adaptation acceptance rate pooled over chains.
    pub acceptance_rate: f64,
    pub warning: Option<String>,
}

/// Metropolis acceptance probability for a symmetric proposal.
pub fn acceptance_probability(log_ratio: f64) -> f64 {
    if log_ratio >= 0.0 {
        1.0
    } else {
        log_ratio.exp()
    }
}

const ADAPT_WINDOW: usize = 25;

struct Chain {
    x: Vec<f64>,
    logp: f64,
    step: f64,
    rng: RandomStream,
}

impl Chain {
    fn propose(&mut self, target: &DwTarget) -> Result<bool> {
        let layout = target.layout();
        let mut y: Vec<f64> = (0..self.x.len()).map(|_| self.rng.normal()).collect();
        layout.project_in_place(&mut y);
        for (yi, xi) in y.iter_mut().zip(&self.x) {
            *yi = xi + self.step * *yi;
        }
        let lp = target.unnorm_log_density(&y)?;
        if self.rng.uniform() < acceptance_probability(lp - self.logp) {
            self.x = y;
            self.logp = lp;
            Ok(true)
        } else {
            Ok(false)
        }
    }
}

/// Metropolis–Hastings reference samples in the zero-CoG subspace.
///
/// Each chain gets its own stream id; chains adapt their step size during
/// burn-in toward `config.target_acceptance`, then run with a frozen step.
/// Samples are interleaved across chains.
pub fn mcmc_reference(
    target: &DwTarget,
    n: usize,
    config: &McmcConfig,
    rng: &RandomStream,
) -> Result<McmcOutput> {
    target.validate()?;
    if n == 0 || config.n_chains == 0 || config.thinning == 0 {
        return Err(Error::Domain("mcmc needs n, chains and thinning >= 1".into()));
    }
    if !(config.step_size > 0.0) {
        return Err(Error::Config(format!("step size {}", config.step_size)));
    }
    let per_chain = n.div_ceil(config.n_chains);
    let rest = target.rest_configuration();
    let runs: Vec<Result<(Vec<Vec<f64>>, usize, usize)>> = (0..config.n_chains)
        .into_par_iter()
        .map(|c| {
            let mut r = rng.substream(c as u64);
            let mut x: Vec<f64> = rest.iter().map(|v| v + config.init_noise * r.normal()).collect();
            target.layout().project_in_place(&mut x);
            let logp = target.unnorm_log_density(&x)?;
            let mut ch = Chain {
                x,
                logp,
                step: config.step_size,
                rng: r,
            };
            let mut window = 0;
            for i in 0..config.burn_in {
                window += ch.propose(target)? as usize;
                if (i + 1) % ADAPT_WINDOW == 0 {
                    let rate = window as f64 / ADAPT_WINDOW as f64;
                    ch.step *= (2.0 * (rate - config.target_acceptance)).exp();
                    window = 0;
                }
            }
            let mut out = Vec::with_capacity(per_chain);
            let (mut acc, mut tried) = (0, 0);
            while out.len() < per_chain {
                for _ in 0..config.thinning {
                    acc += ch.propose(target)? as usize;
                    tried += 1;
                }
                out.push(ch.x.clone());
            }
            Ok((out, acc, tried))
        })
        .collect();
    let mut chains = Vec::with_capacity(runs.len());
    let (mut acc, mut tried) = (0, 0);
    for r in runs {
        let (s, a, t) = r?;
        chains.push(s);
        acc += a;
        tried += t;
    }
    let d = target.dim();
    let mut data = Vec::with_capacity(n * d);
    'outer: for k in 0..per_chain {
        for ch in &chains {
            if data.len() == n * d {
                break 'outer;
            }
            data.extend_from_slice(&ch[k]);
        }
    }
    let rate = acc as f64 / tried as f64;
    let warning = if !(0.1..=0.9).contains(&rate) {
        let msg = format!("mcmc acceptance rate {rate:.3} outside [0.1, 0.9]");
        log::warn!("{msg}");
        Some(msg)
    } else {
        log::info!("mcmc acceptance rate {rate:.3}");
        None
    };
    Ok(McmcOutput {
        samples: Tensor::matrix(n, d, data),
        acceptance_rate: rate,
        warning,
    })
}
