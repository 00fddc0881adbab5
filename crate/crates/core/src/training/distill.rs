use serde::{Deserialize, Serialize};

use super::dsm::{dsm_loss_var, NoisyBatch};
use super::solver::heun_integrate_rows;
use super::{cosine_lr, Loop, TrainReport};
use crate::error::Result;
use crate::models::{DenoiserFn, TrajectoryModel};
use crate::numerics::{RandomStream, Tape, Tensor, Var};
use crate::targets::TargetSampler;
use crate::{EPS, T_MAX};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub iterations: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub lr_final_frac: f64,
    pub p_mean: f64,
    pub p_std: f64,
    pub ema: f64,
    pub lambda_ctm: f64,
    pub lambda_dsm: f64,
    /// Heun steps the teacher spends on each `t -> u` segment.
    pub teacher_substeps: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_batch: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            batch: 256,
            learning_rate: 5e-4,
            lr_final_frac: 0.05,
            p_mean: -1.2,
            p_std: 1.2,
            ema: 0.999,
            lambda_ctm: 1.0,
            lambda_dsm: 1.0,
            teacher_substeps: 8,
            seed: 0,
            eval_every: 500,
            eval_batch: 2048,
        }
    }
}

/// Times of one distillation batch: start `t`, end `s` and the teacher
/// switch-over point `u` between them (`u = s` for forward hops).
#[derive(Clone, Debug)]
struct HopTimes {
    t: Vec<f64>,
    s: Vec<f64>,
    u: Vec<f64>,
}

impl HopTimes {
    fn draw(t: Vec<f64>, rng: &mut RandomStream) -> Self {
        let (lo, hi) = (EPS.ln(), T_MAX.ln());
        let mut s = Vec::with_capacity(t.len());
        let mut u = Vec::with_capacity(t.len());
        for &ti in &t {
            let si = loop {
                let c = (lo + (hi - lo) * rng.uniform()).exp();
                if (c.ln() - ti.ln()).abs() >= 1e-6 {
                    break c;
                }
            };
            let ui = if si < ti { si + (ti - si) * rng.uniform() } else { si };
            s.push(si);
            u.push(ui);
        }
        Self { t, s, u }
    }
}

/// Squared error between the two-hop student estimate
/// `G_sg(G(x_t, t, s), s, eps)` and `target`.
///
/// `params` drive the first hop; `frozen` are the same weights held as
/// constants for the second.
pub fn ctm_loss_var<'t>(
    tape: &'t Tape,
    model: &TrajectoryModel,
    params: &[Var<'t>],
    frozen: &[Var<'t>],
    x_t: &Tensor,
    t: &[f64],
    s: &[f64],
    target: &Tensor,
) -> Var<'t> {
    let tv = tape.constant(Tensor::column(t.to_vec()));
    let sv = tape.constant(Tensor::column(s.to_vec()));
    let x_s = model.traverse_with(tape, params, tape.constant(x_t.clone()), tv, sv);
    let x_est = model.traverse_with(tape, frozen, x_s, sv, tape.scalar(EPS));
    (x_est - tape.constant(target.clone())).square().mean()
}

struct Batch {
    noisy: NoisyBatch,
    x_t: Tensor,
    hops: HopTimes,
    target: Tensor,
}

fn teacher_target<D: DenoiserFn + ?Sized>(
    teacher: &D,
    ema: &TrajectoryModel,
    x_t: &Tensor,
    h: &HopTimes,
    substeps: usize,
) -> Result<Tensor> {
    let x_u = heun_integrate_rows(teacher, x_t, &h.t, &h.u, substeps)?;
    let x_s = ema.traverse_rows(&x_u, &h.u, &h.s)?;
    ema.traverse_rows(&x_s, &h.s, &vec![EPS; h.s.len()])
}

fn loss_and_grads(
    model: &TrajectoryModel,
    params: &[Tensor],
    b: &Batch,
    config: &DistillConfig,
) -> (f64, Vec<Tensor>) {
    let tape = Tape::new();
    let p: Vec<Var> = params.iter().map(|p| tape.var(p.clone())).collect();
    let frozen: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let ctm = ctm_loss_var(&tape, model, &p, &frozen, &b.x_t, &b.hops.t, &b.hops.s, &b.target);
    let dsm = dsm_loss_var(&tape, &b.noisy.x0, &b.noisy.z, &b.noisy.t, model.net.sigma_data, |x, t| {
        model.g_var(&tape, &p, x, t, t)
    });
    let loss = ctm * config.lambda_ctm + dsm * config.lambda_dsm;
    let value = loss.item();
    let g = tape.backward(loss).expect("scalar loss");
    (value, p.iter().map(|&v| g.wrt(v)).collect())
}

/// Fixed validation set: one-hop Heun references and teacher denoisings.
struct Validation {
    noisy: NoisyBatch,
    x_t: Tensor,
    hops: HopTimes,
    reference: Tensor,
    denoised: Tensor,
}

impl Validation {
    fn new<D: DenoiserFn + ?Sized>(
        teacher: &D,
        sampler: &TargetSampler,
        config: &DistillConfig,
        rng: &mut RandomStream,
    ) -> Result<Self> {
        let noisy = NoisyBatch::draw(sampler, teacher.layout(), config.eval_batch, config.p_mean, config.p_std, rng)?;
        let x_t = noisy.noisy();
        let hops = HopTimes::draw(noisy.t.clone(), rng);
        let reference = heun_integrate_rows(teacher, &x_t, &hops.t, &hops.s, 4 * config.teacher_substeps)?;
        let denoised = teacher.denoise_rows(&x_t, &noisy.t)?;
        Ok(Self {
            noisy,
            x_t,
            hops,
            reference,
            denoised,
        })
    }

    fn score(&self, model: &TrajectoryModel, config: &DistillConfig) -> Result<f64> {
        // Hop errors are measured relative to the marginal scale at `s`, so
        // long forward hops do not swamp the score.
        let hop = model.traverse_rows(&self.x_t, &self.hops.t, &self.hops.s)?;
        let sd2 = model.net.sigma_data.powi(2);
        let mut ctm = 0.0;
        for (i, &s) in self.hops.s.iter().enumerate() {
            let e: f64 = hop.row(i).iter().zip(self.reference.row(i)).map(|(a, b)| (a - b) * (a - b)).sum();
            ctm += e / (sd2 + s * s);
        }
        ctm /= hop.len().max(1) as f64;
        let d = model.denoise_rows(&self.x_t, &self.noisy.t)?;
        let mut dsm = 0.0;
        for (i, &t) in self.noisy.t.iter().enumerate() {
            let w = super::edm_weight(t, model.net.sigma_data);
            dsm += w * d
                .row(i)
                .iter()
                .zip(self.denoised.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        dsm /= d.len().max(1) as f64;
        Ok(config.lambda_ctm * ctm + config.lambda_dsm * dsm)
    }
}

fn with_params(model: &TrajectoryModel, params: &[Tensor]) -> TrajectoryModel {
    let mut m = model.clone();
    m.net.params = params.to_vec();
    m
}

/// Distills a bidirectional trajectory model from `teacher`.
///
/// Teacher targets are built from a Heun solve up to `u`, then the EMA
/// student finishes the hop to `s` and maps the result to `eps`. Returns the
/// EMA weights with the best validation score.
pub fn distill_bctm<D: DenoiserFn + ?Sized>(
    student: TrajectoryModel,
    teacher: &D,
    sampler: &TargetSampler,
    config: &DistillConfig,
) -> Result<(TrajectoryModel, TrainReport)> {
    if config.teacher_substeps == 0 {
        return Err(crate::Error::Config("teacher_substeps must be positive".into()));
    }
    let root = RandomStream::new(config.seed, 0x6263746d);
    let val = Validation::new(teacher, sampler, config, &mut root.substream(u64::MAX))?;
    let mut params = student.net.params.clone();
    let mut lp = Loop::new(&params, config.learning_rate, config.ema, val.score(&student, config)?);
    for it in 1..=config.iterations {
        let mut rng = root.substream(it as u64);
        let noisy = NoisyBatch::draw(sampler, teacher.layout(), config.batch, config.p_mean, config.p_std, &mut rng)?;
        let x_t = noisy.noisy();
        let hops = HopTimes::draw(noisy.t.clone(), &mut rng);
        let ema = with_params(&student, &lp.ema);
        let target = teacher_target(teacher, &ema, &x_t, &hops, config.teacher_substeps)?;
        let b = Batch {
            noisy,
            x_t,
            hops,
            target,
        };
        let (loss, grads) = loss_and_grads(&student, &params, &b, config);
        let lr = cosine_lr(config.learning_rate, config.lr_final_frac, it - 1, config.iterations);
        lp.step(it, &mut params, &grads, loss, lr)?;
        if it % config.eval_every.max(1) == 0 || it == config.iterations {
            let v = val.score(&with_params(&student, &lp.ema), config)?;
            log::info!("distill it {it} loss {loss:.4e} eval {v:.4e}");
            lp.record_eval(it, v);
        }
    }
    let (best, report) = lp.finish();
    Ok((with_params(&student, &best), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Architecture, Denoiser, FlowMap, GaussianFlow};
    use crate::numerics::finite_difference_check_multi;
    use crate::targets::{GmmTarget, Target};

    fn student(seed: u64) -> TrajectoryModel {
        let d = Denoiser::new(Architecture::mlp(2, vec![32, 32], 8, 1), 0.5, &mut RandomStream::new(seed, 0)).unwrap();
        TrajectoryModel::warm_start(&d).unwrap()
    }

    fn sampler() -> TargetSampler {
        TargetSampler::Exact(Target::Gmm(GmmTarget::gaussian(vec![0.0; 2], 0.25).unwrap()))
    }

    #[test]
    fn hop_times_respect_ordering_rules() {
        let mut rng = RandomStream::new(0, 0);
        let t = super::super::lognormal_times(5000, -1.2, 1.2, &mut rng);
        let h = HopTimes::draw(t, &mut rng);
        for i in 0..h.t.len() {
            let (t, s, u) = (h.t[i], h.s[i], h.u[i]);
            assert!((EPS..=T_MAX).contains(&s));
            assert!((s.ln() - t.ln()).abs() >= 1e-6);
            if s < t {
                assert!(s <= u && u <= t);
            } else {
                assert_eq!(u, s);
            }
        }
    }

    #[test]
    fn zero_iterations_leave_student_unchanged() {
        let m = student(0);
        let f = GaussianFlow::new(vec![0.0; 2], 0.25).unwrap();
        let cfg = DistillConfig {
            iterations: 0,
            eval_batch: 32,
            ..DistillConfig::default()
        };
        let (out, report) = distill_bctm(m.clone(), &f, &sampler(), &cfg).unwrap();
        assert_eq!(out, m);
        assert!(report.losses.is_empty());
    }

    #[test]
    fn ctm_loss_vanishes_on_own_prediction() {
        let m = student(1);
        let mut rng = RandomStream::new(1, 0);
        let x = rng.normal_tensor(8, 2);
        let t = vec![3.0; 8];
        let s = vec![0.7; 8];
        let target = m.traverse(&m.traverse(&x, 3.0, 0.7).unwrap(), 0.7, EPS).unwrap();
        let tape = Tape::new();
        let p = m.net.variables(&tape);
        let c = m.net.constants(&tape);
        assert!(ctm_loss_var(&tape, &m, &p, &c, &x, &t, &s, &target).item() < 1e-24);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = student(2);
        let mut rng = RandomStream::new(3, 0);
        let noisy = NoisyBatch::draw(&sampler(), None, 12, -1.2, 1.2, &mut rng).unwrap();
        let x_t = noisy.noisy();
        let h = HopTimes::draw(noisy.t.clone(), &mut rng);
        let target = rng.normal_tensor(12, 2).scale(0.5);
        let frozen = m.net.params.clone();
        let worst = finite_difference_check_multi(
            |tape, p| {
                let c: Vec<Var> = frozen.iter().map(|f| tape.constant(f.clone())).collect();
                let ctm = ctm_loss_var(tape, &m, p, &c, &x_t, &h.t, &h.s, &target);
                let dsm = dsm_loss_var(tape, &noisy.x0, &noisy.z, &noisy.t, 0.5, |x, t| m.g_var(tape, p, x, t, t));
                ctm + dsm
            },
            &m.net.params,
            100,
            &mut rng,
            1e-6,
            1e-8,
        )
        .unwrap();
        assert!(worst < 1e-4, "relative error {worst}");
    }

    #[test]
    fn distillation_improves_validation_score() {
        let f = GaussianFlow::new(vec![1.0; 2], 0.25).unwrap();
        let sampler = TargetSampler::Exact(Target::Gmm(GmmTarget::gaussian(vec![1.0; 2], 0.25).unwrap()));
        let cfg = DistillConfig {
            iterations: 300,
            batch: 128,
            learning_rate: 2e-3,
            ema: 0.95,
            teacher_substeps: 2,
            eval_every: 100,
            eval_batch: 512,
            ..DistillConfig::default()
        };
        let (_, report) = distill_bctm(student(4), &f, &sampler, &cfg).unwrap();
        assert!(report.best_eval < 0.5 * report.evals[0].1, "{:?}", report.evals);
    }
}
