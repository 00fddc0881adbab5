use rayon::prelude::*;

use super::{add_into, row_log_normal, shards, TimeGrid, WeightedEnsemble};
use crate::error::{Error, Result};
use crate::models::FlowMap;
use crate::numerics::{RandomStream, Tensor};
use crate::sampling::noise;
use crate::targets::Target;

struct Shard {
    samples: Tensor,
    log_proposal: Vec<f64>,
    log_target: Option<Vec<f64>>,
    trajectory: Option<Vec<Tensor>>,
}

fn check_dims<M: FlowMap + ?Sized>(model: &M, target: &Target) -> Result<()> {
    if model.dim() != target.dim() {
        return Err(Error::Shape(format!("model dim {} vs target dim {}", model.dim(), target.dim())));
    }
    Ok(())
}

fn density_dim<M: FlowMap + ?Sized>(model: &M) -> usize {
    model.layout().map_or(model.dim(), |l| l.subspace_dim())
}

/// `sum_n log q(x_{t_n} | x_{t_{n-1}})` for one grid index, batched.
fn target_kernel<M: FlowMap + ?Sized>(model: &M, grid: &TimeGrid, n: usize, prev: &Tensor, next: &Tensor) -> Result<Vec<f64>> {
    let mean = model.traverse(prev, grid.t[n - 1], grid.tar[n - 1])?;
    row_log_normal(next, &mean, grid.target_variance(n), density_dim(model))
}

fn run_shard<M: FlowMap + ?Sized>(
    model: &M,
    target: Option<&Target>,
    grid: &TimeGrid,
    k: usize,
    rng: &mut RandomStream,
    record: bool,
) -> Result<Shard> {
    let (n, d, layout) = (grid.steps(), model.dim(), model.layout());
    let dim = density_dim(model);
    let t = &grid.t;
    let mut x = noise(k, d, layout, rng).scale(t[n]);
    let mut log_p = row_log_normal(&x, &Tensor::zeros(&[k, d]), t[n] * t[n], dim)?;
    let mut log_q = target.map(|_| vec![0.0; k]);
    let mut traj = record.then(|| vec![Tensor::zeros(&[0, 0]); n + 1]);
    for i in (1..=n).rev() {
        let var = grid.proposal_variance(i);
        let mean = model.traverse(&x, t[i], grid.prop[i - 1])?;
        let mut next = mean.clone();
        next.axpy(var.sqrt(), &noise(k, d, layout, rng));
        add_into(&mut log_p, &row_log_normal(&next, &mean, var, dim)?);
        if let Some(q) = log_q.as_mut() {
            add_into(q, &target_kernel(model, grid, i, &next, &x)?);
        }
        if let Some(tr) = traj.as_mut() {
            tr[i] = x;
        }
        x = next;
    }
    if let (Some(q), Some(target)) = (log_q.as_mut(), target) {
        add_into(q, &target.log_density_rows(&x)?);
    }
    if let Some(tr) = traj.as_mut() {
        tr[0] = x.clone();
    }
    Ok(Shard {
        samples: x,
        log_proposal: log_p,
        log_target: log_q,
        trajectory: traj,
    })
}

fn run<M: FlowMap + ?Sized>(
    model: &M,
    target: Option<&Target>,
    grid: &TimeGrid,
    k: usize,
    rng: &mut RandomStream,
    record: bool,
) -> Result<Vec<Shard>> {
    grid.validate()?;
    if k == 0 {
        return Err(Error::Domain("K must be at least 1".into()));
    }
    shards(k, rng)
        .into_par_iter()
        .map(|(size, mut r)| run_shard(model, target, grid, size, &mut r, record))
        .collect()
}

fn concat(parts: Vec<Tensor>) -> Result<Tensor> {
    if parts.len() == 1 {
        return Ok(parts.into_iter().next().unwrap());
    }
    Tensor::concat_rows(&parts)
}

fn merge(shards: Vec<Shard>) -> Result<(Tensor, Vec<f64>, Option<Vec<f64>>, Option<Vec<Tensor>>)> {
    let mut samples = Vec::new();
    let mut log_p = Vec::new();
    let mut log_q: Option<Vec<f64>> = None;
    let mut traj: Option<Vec<Vec<Tensor>>> = None;
    for s in shards {
        samples.push(s.samples);
        log_p.extend(s.log_proposal);
        if let Some(q) = s.log_target {
            log_q.get_or_insert_with(Vec::new).extend(q);
        }
        if let Some(tr) = s.trajectory {
            let slots = traj.get_or_insert_with(|| vec![Vec::new(); tr.len()]);
            for (slot, x) in slots.iter_mut().zip(tr) {
                slot.push(x);
            }
        }
    }
    let traj = traj.map(|t| t.into_iter().map(concat).collect::<Result<Vec<_>>>()).transpose()?;
    Ok((concat(samples)?, log_p, log_q, traj))
}

/// Draws K recorded trajectories from the alternating proposal.
///
/// `log_weights` of the result hold `-log p(trajectory)`, the proposal part
/// of the importance weight. NFE is N traverse calls per sample.
pub fn proposal_rollout<M: FlowMap + ?Sized>(
    model: &M,
    grid: &TimeGrid,
    k: usize,
    rng: &mut RandomStream,
) -> Result<WeightedEnsemble> {
    let seed = rng.seed();
    let (samples, log_p, _, traj) = merge(run(model, None, grid, k, rng, true)?)?;
    WeightedEnsemble {
        samples,
        log_weights: log_p.iter().map(|v| -v).collect(),
        trajectory: traj,
        nfe: grid.steps(),
        seed,
        grid_hash: grid.hash(),
        pipeline: "proposal".into(),
    }
    .checked()
}

/// Per-sample `log π̄(x_{t_0}) + sum_n log q(x_{t_n} | x_{t_{n-1}})` of
/// recorded trajectories.
pub fn target_log_density<M: FlowMap + ?Sized>(
    model: &M,
    trajectory: &[Tensor],
    target: &Target,
    grid: &TimeGrid,
) -> Result<Vec<f64>> {
    check_dims(model, target)?;
    grid.validate()?;
    let n = grid.steps();
    if trajectory.len() != n + 1 {
        return Err(Error::Contract(format!(
            "trajectory has {} slots but the grid needs {}",
            trajectory.len(),
            n + 1
        )));
    }
    let k = trajectory[0].rows();
    if trajectory.iter().any(|x| x.rows() != k || x.cols() != model.dim()) {
        return Err(Error::Contract("trajectory slots disagree in shape".into()));
    }
    let mut out = vec![0.0; k];
    for i in (1..=n).rev() {
        add_into(&mut out, &target_kernel(model, grid, i, &trajectory[i - 1], &trajectory[i])?);
    }
    add_into(&mut out, &target.log_density_rows(&trajectory[0])?);
    Ok(out)
}

/// Alternating flow-map importance sampling; NFE is 2N per sample.
pub fn bctm_is<M: FlowMap + ?Sized>(
    model: &M,
    target: &Target,
    grid: &TimeGrid,
    k: usize,
    rng: &mut RandomStream,
) -> Result<WeightedEnsemble> {
    check_dims(model, target)?;
    let seed = rng.seed();
    let (samples, log_p, log_q, _) = merge(run(model, Some(target), grid, k, rng, false)?)?;
    let log_q = log_q.ok_or_else(|| Error::Contract("target terms missing".into()))?;
    WeightedEnsemble {
        samples,
        log_weights: log_q.iter().zip(&log_p).map(|(q, p)| q - p).collect(),
        trajectory: None,
        nfe: 2 * grid.steps(),
        seed,
        grid_hash: grid.hash(),
        pipeline: "bctm_is".into(),
    }
    .checked()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::is_engine::{ess, SHARD};
    use crate::models::{Counted, GaussianFlow};
    use crate::numerics::gaussian_log_density_slice;
    use crate::sampling::log_schedule;
    use crate::targets::GmmTarget;
    use crate::{EPS, T_MAX};

    fn matched(n: usize, v: f64) -> TimeGrid {
        let mut t = log_schedule(n, EPS, T_MAX).unwrap().times().to_vec();
        t[0] = (2.0 * EPS).min(0.5 * (EPS + t[1]));
        TimeGrid::gaussian_matched(t, &vec![0.5; n], v).unwrap()
    }

    fn gaussian(mean: Vec<f64>, v: f64) -> (GaussianFlow, Target) {
        let f = GaussianFlow::new(mean.clone(), v).unwrap();
        (f, Target::Gmm(GmmTarget::gaussian(mean, v).unwrap()))
    }

    #[test]
    fn gaussian_weights_are_constant_on_matched_grid() {
        // A nonzero mean would add |mean|^2 / T^2 of variance through the prior.
        let (f, target) = gaussian(vec![0.0, 0.0], 0.25);
        for n in [1, 3, 6] {
            let g = matched(n, 0.25);
            let e = bctm_is(&f, &target, &g, 4000, &mut RandomStream::new(n as u64, 0)).unwrap();
            let m = e.log_weights.iter().sum::<f64>() / e.len() as f64;
            let var = e.log_weights.iter().map(|w| (w - m).powi(2)).sum::<f64>() / e.len() as f64;
            assert!(var < 1e-8, "N={n}: log-weight variance {var}");
            assert!(ess(&e).unwrap() / e.len() as f64 > 0.999);
        }
    }

    #[test]
    fn streamed_weights_equal_two_pass_weights() {
        let (f, target) = gaussian(vec![1.0], 0.6);
        let g = TimeGrid::new(vec![0.01, 0.5, 3.0, T_MAX], vec![0.02, 0.9, 10.0], vec![EPS, 0.3, 2.0]).unwrap();
        let k = SHARD + 17;
        let a = bctm_is(&f, &target, &g, k, &mut RandomStream::new(5, 1)).unwrap();
        let p = proposal_rollout(&f, &g, k, &mut RandomStream::new(5, 1)).unwrap();
        let q = target_log_density(&f, p.trajectory.as_ref().unwrap(), &target, &g).unwrap();
        assert_eq!(a.samples, p.samples);
        for i in 0..k {
            assert!((a.log_weights[i] - (q[i] + p.log_weights[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn single_step_proposal_is_one_gaussian_term() {
        let (f, _) = gaussian(vec![0.0, 2.0], 1.0);
        let g = TimeGrid::new(vec![0.01, T_MAX], vec![0.01], vec![EPS]).unwrap();
        let mut r = RandomStream::new(2, 0);
        let p = proposal_rollout(&f, &g, 3, &mut r).unwrap();
        let tr = p.trajectory.as_ref().unwrap();
        let hop = f.traverse(&tr[1], T_MAX, EPS).unwrap();
        for i in 0..3 {
            let prior = gaussian_log_density_slice(tr[1].row(i), &[0.0, 0.0], T_MAX * T_MAX, 2).unwrap();
            let kern = gaussian_log_density_slice(tr[0].row(i), hop.row(i), 0.01f64.powi(2) - EPS * EPS, 2).unwrap();
            assert!((-p.log_weights[i] - prior - kern).abs() < 1e-10);
        }
    }

    #[test]
    fn anchored_target_term_is_plain_diffusion_kernel() {
        // tar_0 = t_0 makes the target mean the previous state itself.
        let (f, target) = gaussian(vec![0.3], 2.0);
        let g = TimeGrid::new(vec![0.05, T_MAX], vec![0.05], vec![EPS]).unwrap();
        let tr = vec![Tensor::column(vec![0.1, -0.4]), Tensor::column(vec![30.0, -7.0])];
        let got = target_log_density(&f, &tr, &target, &g).unwrap();
        for i in 0..2 {
            let x0 = tr[0].data()[i];
            let kern = gaussian_log_density_slice(&[tr[1].data()[i]], &[x0], T_MAX * T_MAX - 0.0025, 1).unwrap();
            let want = kern + target.unnorm_log_density(&[x0]).unwrap();
            assert!((got[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn shifted_trajectory_matches_brute_force() {
        let (f, target) = gaussian(vec![0.0, 0.0], 0.5);
        let g = matched(4, 0.5);
        let mut p = proposal_rollout(&f, &g, 6, &mut RandomStream::new(3, 0)).unwrap();
        let tr = p.trajectory.as_mut().unwrap();
        for x in tr.iter_mut() {
            *x = x.map(|v| v + 1.5);
        }
        let got = target_log_density(&f, tr, &target, &g).unwrap();
        for s in 0..6 {
            let mut want = target.unnorm_log_density(tr[0].row(s)).unwrap();
            for n in 1..=4 {
                let r = f.flow_factor(g.t[n - 1], g.tar[n - 1]);
                let mean: Vec<f64> = tr[n - 1].row(s).iter().map(|v| v * r).collect();
                want += gaussian_log_density_slice(tr[n].row(s), &mean, g.target_variance(n), 2).unwrap();
            }
            assert!((got[s] - want).abs() < 1e-9 * want.abs().max(1.0));
        }
    }

    #[test]
    fn proposal_marginals_follow_gaussian_pushforward() {
        let v = 0.4;
        let (f, _) = gaussian(vec![0.0], v);
        let g = matched(3, v);
        let k = 60_000;
        let p = proposal_rollout(&f, &g, k, &mut RandomStream::new(4, 0)).unwrap();
        let tr = p.trajectory.unwrap();
        let mut var = T_MAX * T_MAX;
        for n in (1..=3).rev() {
            let r = f.flow_factor(g.t[n], g.prop[n - 1]);
            var = var * r * r + g.proposal_variance(n);
            let emp = tr[n - 1].column_variances()[0];
            assert!((emp / var - 1.0).abs() < 5.0 * (2.0 / k as f64).sqrt(), "n={n}: {emp} vs {var}");
        }
    }

    #[test]
    fn nfe_matches_call_counter() {
        let (f, target) = gaussian(vec![0.0], 1.0);
        let g = matched(5, 1.0);
        let c = Counted::new(&f);
        let e = bctm_is(&c, &target, &g, 100, &mut RandomStream::new(6, 0)).unwrap();
        assert_eq!(c.rows(), (e.nfe * 100) as u64);
        let c = Counted::new(&f);
        let p = proposal_rollout(&c, &g, 100, &mut RandomStream::new(6, 0)).unwrap();
        assert_eq!(c.rows(), (p.nfe * 100) as u64);
    }

    #[test]
    fn missing_slot_is_contract_error() {
        let (f, target) = gaussian(vec![0.0], 1.0);
        let g = matched(2, 1.0);
        let e = target_log_density(&f, &[Tensor::column(vec![0.0])], &target, &g).unwrap_err();
        assert!(matches!(e, Error::Contract(_)));
    }
}
