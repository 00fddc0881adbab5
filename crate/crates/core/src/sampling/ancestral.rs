use super::kernels::{ddim_step, forward_noise, noise};
use super::schedule::Schedule;
use crate::error::{Error, Result};
use crate::models::{DenoiserFn, FlowMap};
use crate::numerics::{RandomStream, Tensor};
use crate::EPS;

/// Output of a sampler run.
#[derive(Clone, Debug)]
pub struct SampleBatch {
    pub samples: Tensor,
    /// States indexed by schedule position: `trajectory[n]` lives at `t_n`.
    pub trajectory: Option<Vec<Tensor>>,
    /// Network evaluations per sample.
    pub nfe: usize,
}

/// K independent DDIM-style chains down `schedule` from `N(0, T^2 I)`.
pub fn ancestral_sample<D: DenoiserFn + ?Sized>(
    model: &D,
    schedule: &Schedule,
    eta: f64,
    k: usize,
    rng: &mut RandomStream,
    record: bool,
) -> Result<SampleBatch> {
    if k == 0 {
        return Err(Error::Domain("K must be at least 1".into()));
    }
    let t = schedule.times();
    let n = schedule.steps();
    let mut x = noise(k, model.dim(), model.layout(), rng).scale(t[n]);
    let mut traj = record.then(|| vec![Tensor::zeros(&[0, 0]); n + 1]);
    for i in (1..=n).rev() {
        let next = ddim_step(model, &x, t[i], t[i - 1], eta, rng)?;
        if let Some(tr) = traj.as_mut() {
            tr[i] = x;
        }
        x = next;
    }
    if let Some(tr) = traj.as_mut() {
        tr[0] = x.clone();
    }
    Ok(SampleBatch {
        samples: x,
        trajectory: traj,
        nfe: n,
    })
}

/// Consistency-model multistep sampling: jump to `eps`, re-noise to the next
/// anchor, repeat. `times` is descending; NFE equals its length.
pub fn cm_multistep_sample<M: FlowMap + ?Sized>(
    model: &M,
    times: &[f64],
    k: usize,
    rng: &mut RandomStream,
) -> Result<SampleBatch> {
    if times.is_empty() || k == 0 {
        return Err(Error::Domain("need at least one time and one sample".into()));
    }
    if times.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::Domain("multistep times must be strictly descending".into()));
    }
    let layout = model.layout();
    let mut x = noise(k, model.dim(), layout, rng).scale(times[0]);
    let mut out = x.clone();
    for (i, &t) in times.iter().enumerate() {
        out = model.traverse(&x, t, EPS)?;
        if let Some(&next) = times.get(i + 1) {
            x = forward_noise(&out, EPS, next, layout, rng)?;
        }
    }
    Ok(SampleBatch {
        samples: out,
        trajectory: None,
        nfe: times.len(),
    })
}
