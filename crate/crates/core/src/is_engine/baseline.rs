use rayon::prelude::*;

use super::{add_into, row_log_normal, shards, WeightedEnsemble};
use crate::error::{Error, Result};
use crate::models::DenoiserFn;
use crate::numerics::{RandomStream, Tensor};
use crate::sampling::{ddim_kernel, noise, Schedule};
use crate::targets::Target;

fn run_shard<D: DenoiserFn + ?Sized>(
    model: &D,
    target: &Target,
    schedule: &Schedule,
    eta: f64,
    k: usize,
    rng: &mut RandomStream,
) -> Result<(Tensor, Vec<f64>)> {
    let t = schedule.times();
    let (n, d, layout) = (schedule.steps(), model.dim(), model.layout());
    let dim = target.density_dim();
    let mut x = noise(k, d, layout, rng).scale(t[n]);
    let mut lw: Vec<f64> = row_log_normal(&x, &Tensor::zeros(&[k, d]), t[n] * t[n], dim)?
        .into_iter()
        .map(|v| -v)
        .collect();
    for i in (1..=n).rev() {
        let (mean, sigma) = ddim_kernel(model, &x, t[i], t[i - 1], eta)?;
        let mut next = mean.clone();
        next.axpy(sigma, &noise(k, d, layout, rng));
        let log_p = row_log_normal(&next, &mean, sigma * sigma, dim)?;
        let log_q = row_log_normal(&x, &next, t[i] * t[i] - t[i - 1] * t[i - 1], dim)?;
        for ((w, p), q) in lw.iter_mut().zip(log_p).zip(log_q) {
            *w += q - p;
        }
        x = next;
    }
    add_into(&mut lw, &target.log_density_rows(&x)?);
    Ok((x, lw))
}

/// Importance-weighted DDPM-style sampling in trajectory space.
///
/// The target chain is the forward diffusion started at `π̄`; the proposal is
/// the reverse chain with stochasticity `eta`, which must be positive.
pub fn baseline_ddpm_is<D: DenoiserFn + ?Sized>(
    model: &D,
    target: &Target,
    schedule: &Schedule,
    eta: f64,
    k: usize,
    rng: &mut RandomStream,
) -> Result<WeightedEnsemble> {
    if eta <= 0.0 {
        return Err(Error::DegenerateProposal(format!(
            "eta = {eta} makes the reverse kernels deterministic"
        )));
    }
    if !(eta <= 1.0) {
        return Err(Error::Domain(format!("eta must lie in (0, 1], got {eta}")));
    }
    if k == 0 {
        return Err(Error::Domain("K must be at least 1".into()));
    }
    if model.dim() != target.dim() {
        return Err(Error::Shape(format!("model dim {} vs target dim {}", model.dim(), target.dim())));
    }
    let seed = rng.seed();
    let parts: Vec<(Tensor, Vec<f64>)> = shards(k, rng)
        .into_par_iter()
        .map(|(size, mut r)| run_shard(model, target, schedule, eta, size, &mut r))
        .collect::<Result<_>>()?;
    let (xs, ws): (Vec<Tensor>, Vec<Vec<f64>>) = parts.into_iter().unzip();
    let samples = if xs.len() == 1 { xs.into_iter().next().unwrap() } else { Tensor::concat_rows(&xs)? };
    WeightedEnsemble {
        samples,
        log_weights: ws.concat(),
        trajectory: None,
        nfe: schedule.steps(),
        seed,
        grid_hash: String::new(),
        pipeline: format!("ddpm_is_eta{eta}"),
    }
    .checked()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::is_engine::ess;
    use crate::models::{Counted, GaussianFlow};
    use crate::numerics::gaussian_log_density_slice;
    use crate::sampling::log_schedule;
    use crate::targets::GmmTarget;
    use crate::{EPS, T_MAX};

    #[test]
    fn eta_zero_is_degenerate() {
        let f = GaussianFlow::new(vec![0.0], 1.0).unwrap();
        let t = Target::Gmm(GmmTarget::gaussian(vec![0.0], 1.0).unwrap());
        let s = log_schedule(5, EPS, T_MAX).unwrap();
        let e = baseline_ddpm_is(&f, &t, &s, 0.0, 10, &mut RandomStream::new(0, 0)).unwrap_err();
        assert!(matches!(e, Error::DegenerateProposal(_)));
    }

    #[test]
    fn single_sample_has_unit_ess() {
        let f = GaussianFlow::new(vec![0.0], 1.0).unwrap();
        let t = Target::Gmm(GmmTarget::gaussian(vec![0.0], 1.0).unwrap());
        let s = log_schedule(5, EPS, T_MAX).unwrap();
        let e = baseline_ddpm_is(&f, &t, &s, 1.0, 1, &mut RandomStream::new(0, 0)).unwrap();
        assert_eq!(ess(&e).unwrap(), 1.0);
    }

    #[test]
    fn one_step_weight_matches_hand_assembly() {
        let f = GaussianFlow::new(vec![1.0], 0.5).unwrap();
        let t = Target::Gmm(GmmTarget::gaussian(vec![1.0], 0.5).unwrap());
        let s = Schedule::explicit(vec![0.3, T_MAX]).unwrap();
        let mut r = RandomStream::new(1, 0);
        let e = baseline_ddpm_is(&f, &t, &s, 0.7, 1, &mut r.clone()).unwrap();
        let mut shard = shards(1, &mut r).remove(0).1;
        let x_n = shard.normal() * T_MAX;
        let (mean, sigma) = ddim_kernel(&f, &Tensor::scalar(x_n), T_MAX, 0.3, 0.7).unwrap();
        let x0 = mean.item() + sigma * shard.normal();
        assert!((e.samples.item() - x0).abs() < 1e-12);
        let want = t.unnorm_log_density(&[x0]).unwrap()
            + gaussian_log_density_slice(&[x_n], &[x0], T_MAX * T_MAX - 0.09, 1).unwrap()
            - gaussian_log_density_slice(&[x_n], &[0.0], T_MAX * T_MAX, 1).unwrap()
            - gaussian_log_density_slice(&[x0], &[mean.item()], sigma * sigma, 1).unwrap();
        assert!((e.log_weights[0] - want).abs() < 1e-9);
    }

    #[test]
    fn nfe_matches_call_counter() {
        let f = GaussianFlow::new(vec![0.0, 0.0], 1.0).unwrap();
        let t = Target::Gmm(GmmTarget::gaussian(vec![0.0, 0.0], 1.0).unwrap());
        let s = log_schedule(7, EPS, T_MAX).unwrap();
        let c = Counted::new(&f);
        let e = baseline_ddpm_is(&c, &t, &s, 1.0, 50, &mut RandomStream::new(2, 0)).unwrap();
        assert_eq!(c.rows(), (e.nfe * 50) as u64);
    }
}
