use serde::{Deserialize, Serialize};

use super::{cosine_lr, edm_weight, lognormal_times, Loop, TrainReport};
use crate::error::Result;
use crate::models::{DenoiserFn, Denoiser};
use crate::numerics::{RandomStream, Tape, Tensor, Var};
use crate::targets::{ParticleLayout, TargetSampler};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DsmConfig {
    pub iterations: usize,
    pub batch: usize,
    pub learning_rate: f64,
    /// Final learning rate as a fraction of the initial one (cosine decay).
    pub lr_final_frac: f64,
    pub p_mean: f64,
    pub p_std: f64,
    pub ema: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_batch: usize,
}

impl Default for DsmConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            batch: 512,
            learning_rate: 1e-3,
            lr_final_frac: 0.05,
            p_mean: -1.2,
            p_std: 1.2,
            ema: 0.999,
            seed: 0,
            eval_every: 500,
            eval_batch: 4096,
        }
    }
}

/// One training batch: clean samples, unit noise and per-row times.
#[derive(Clone, Debug)]
pub(crate) struct NoisyBatch {
    pub x0: Tensor,
    pub z: Tensor,
    pub t: Vec<f64>,
}

impl NoisyBatch {
    pub fn draw(
        sampler: &TargetSampler,
        layout: Option<ParticleLayout>,
        n: usize,
        p_mean: f64,
        p_std: f64,
        rng: &mut RandomStream,
    ) -> Result<Self> {
        let x0 = sampler.draw(n, rng)?;
        let z = match layout {
            Some(l) => l.subspace_noise(n, rng),
            None => rng.normal_tensor(n, x0.cols()),
        };
        let t = lognormal_times(n, p_mean, p_std, rng);
        Ok(Self { x0, z, t })
    }

    pub fn noisy(&self) -> Tensor {
        let mut x = self.x0.clone();
        for (i, &t) in self.t.iter().enumerate() {
            for (a, b) in x.row_mut(i).iter_mut().zip(self.z.row(i)) {
                *a += t * b;
            }
        }
        x
    }
}

/// Weighted denoising loss `mean_i lambda(t_i) |D(x0 + t z, t) - x0|^2 / d`.
///
/// `denoise` receives the noisy input and the time column.
pub fn dsm_loss_var<'t, F>(tape: &'t Tape, x0: &Tensor, z: &Tensor, t: &[f64], sigma_data: f64, denoise: F) -> Var<'t>
where
    F: FnOnce(Var<'t>, Var<'t>) -> Var<'t>,
{
    let b = NoisyBatch {
        x0: x0.clone(),
        z: z.clone(),
        t: t.to_vec(),
    };
    let xt = tape.constant(b.noisy());
    let tv = tape.constant(Tensor::column(t.to_vec()));
    let w = tape.constant(Tensor::column(t.iter().map(|&s| edm_weight(s, sigma_data)).collect()));
    let d = denoise(xt, tv);
    ((d - tape.constant(x0.clone())).square() * w).mean()
}

fn batch_loss(model: &Denoiser, params: &[Tensor], b: &NoisyBatch, grad: bool) -> (f64, Vec<Tensor>) {
    let tape = Tape::new();
    let p: Vec<Var> = params
        .iter()
        .map(|p| if grad { tape.var(p.clone()) } else { tape.constant(p.clone()) })
        .collect();
    let loss = dsm_loss_var(&tape, &b.x0, &b.z, &b.t, model.net.sigma_data, |x, t| {
        model.denoise_var(&tape, &p, x, t)
    });
    let value = loss.item();
    if !grad {
        return (value, Vec::new());
    }
    let g = tape.backward(loss).expect("scalar loss");
    (value, p.iter().map(|&v| g.wrt(v)).collect())
}

/// Validation loss of `params`, evaluated in chunks.
fn eval_loss(model: &Denoiser, params: &[Tensor], b: &NoisyBatch) -> f64 {
    const CHUNK: usize = 1024;
    let n = b.t.len();
    let mut total = 0.0;
    for a in (0..n).step_by(CHUNK) {
        let e = (a + CHUNK).min(n);
        let part = NoisyBatch {
            x0: b.x0.slice_rows(a, e),
            z: b.z.slice_rows(a, e),
            t: b.t[a..e].to_vec(),
        };
        total += batch_loss(model, params, &part, false).0 * (e - a) as f64;
    }
    total / n.max(1) as f64
}

/// Trains `model` by denoising score matching with EMA weights.
///
/// Returns the EMA weights with the lowest validation loss.
pub fn train_dsm(model: Denoiser, sampler: &TargetSampler, config: &DsmConfig) -> Result<(Denoiser, TrainReport)> {
    let root = RandomStream::new(config.seed, 0x64736d);
    let layout = model.layout();
    let val = NoisyBatch::draw(
        sampler,
        layout,
        config.eval_batch,
        config.p_mean,
        config.p_std,
        &mut root.substream(u64::MAX),
    )?;
    let mut params = model.net.params.clone();
    let mut lp = Loop::new(&params, config.learning_rate, config.ema, eval_loss(&model, &params, &val));
    for it in 1..=config.iterations {
        let mut rng = root.substream(it as u64);
        let b = NoisyBatch::draw(sampler, layout, config.batch, config.p_mean, config.p_std, &mut rng)?;
        let (loss, grads) = batch_loss(&model, &params, &b, true);
        let lr = cosine_lr(config.learning_rate, config.lr_final_frac, it - 1, config.iterations);
        lp.step(it, &mut params, &grads, loss, lr)?;
        if it % config.eval_every.max(1) == 0 || it == config.iterations {
            let v = eval_loss(&model, &lp.ema, &val);
            log::info!("dsm it {it} loss {loss:.4e} eval {v:.4e}");
            lp.record_eval(it, v);
        }
    }
    let (best, report) = lp.finish();
    let mut out = model;
    out.net.params = best;
    Ok((out, report))
}
