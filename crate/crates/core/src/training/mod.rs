//! Denoising score matching and bidirectional trajectory distillation.

mod distill;
mod dsm;
mod solver;

pub use distill::{ctm_loss_var, distill_bctm, DistillConfig};
pub use dsm::{dsm_loss_var, train_dsm, DsmConfig};
pub use solver::{heun_integrate, heun_integrate_rows, heun_step, heun_step_rows, OdeFlow};

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{AdamState, RandomStream, Tensor};
use crate::{EPS, T_MAX};

/// Loss and gradient history of one training run.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
    /// `(iteration, validation loss of the EMA weights)`.
    pub evals: Vec<(usize, f64)>,
    pub best_iteration: usize,
    pub best_eval: f64,
    pub ema_rate: f64,
    pub wall_clock_s: f64,
}

impl TrainReport {
    /// Columns `iteration,loss,grad_norm,eval_loss`; `eval_loss` is empty
    /// between evaluations.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["iteration", "loss", "grad_norm", "eval_loss"])?;
        let mut evals = self.evals.iter().peekable();
        for i in 0..=self.losses.len() {
            let mut eval = String::new();
            while let Some(&&(it, v)) = evals.peek() {
                if it > i {
                    break;
                }
                if it == i {
                    eval = format!("{v:e}");
                }
                evals.next();
            }
            if i == 0 {
                w.write_record(["0", "", "", &eval])?;
                continue;
            }
            w.write_record([
                i.to_string(),
                format!("{:e}", self.losses[i - 1]),
                format!("{:e}", self.grad_norms[i - 1]),
                eval,
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// EDM log-normal training times clipped to `[eps, T]`.
pub fn lognormal_times(n: usize, p_mean: f64, p_std: f64, rng: &mut RandomStream) -> Vec<f64> {
    (0..n)
        .map(|_| (p_mean + p_std * rng.normal()).exp().clamp(EPS, T_MAX))
        .collect()
}

/// EDM loss weight `(t^2 + sd^2) / (t sd)^2`.
pub fn edm_weight(t: f64, sigma_data: f64) -> f64 {
    (t * t + sigma_data * sigma_data) / (t * sigma_data).powi(2)
}

/// `ema <- rate ema + (1 - rate) params`.
pub fn ema_update(ema: &mut [Tensor], params: &[Tensor], rate: f64) {
    for (e, p) in ema.iter_mut().zip(params) {
        for (a, b) in e.data_mut().iter_mut().zip(p.data()) {
            *a = rate * *a + (1.0 - rate) * b;
        }
    }
}

pub(crate) fn grad_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Cosine decay from `lr` to `lr * final_frac`.
pub(crate) fn cosine_lr(lr: f64, final_frac: f64, it: usize, total: usize) -> f64 {
    let p = it as f64 / total.max(1) as f64;
    lr * (final_frac + (1.0 - final_frac) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

/// Shared optimizer bookkeeping: Adam, EMA, best-EMA tracking and report.
pub(crate) struct Loop {
    pub adam: AdamState,
    pub ema: Vec<Tensor>,
    pub best: Vec<Tensor>,
    pub report: TrainReport,
    start: Instant,
}

impl Loop {
    pub fn new(params: &[Tensor], lr: f64, ema_rate: f64, initial_eval: f64) -> Self {
        Self {
            adam: AdamState::new(params, lr),
            ema: params.to_vec(),
            best: params.to_vec(),
            report: TrainReport {
                evals: vec![(0, initial_eval)],
                best_eval: initial_eval,
                ema_rate,
                ..TrainReport::default()
            },
            start: Instant::now(),
        }
    }

    pub fn step(&mut self, it: usize, params: &mut [Tensor], grads: &[Tensor], loss: f64, lr: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Training {
                step: it as u64,
                message: format!("loss is {loss}"),
            });
        }
        self.adam.learning_rate = lr;
        self.adam.step(params, grads).map_err(|e| Error::Training {
            step: it as u64,
            message: e.to_string(),
        })?;
        ema_update(&mut self.ema, params, self.report.ema_rate);
        self.report.losses.push(loss);
        self.report.grad_norms.push(grad_norm(grads));
        Ok(())
    }

    pub fn record_eval(&mut self, it: usize, value: f64) {
        self.report.evals.push((it, value));
        if value.is_finite() && value < self.report.best_eval {
            self.report.best_eval = value;
            self.report.best_iteration = it;
            self.best = self.ema.clone();
        }
    }

    pub fn finish(mut self) -> (Vec<Tensor>, TrainReport) {
        self.report.wall_clock_s = self.start.elapsed().as_secs_f64();
        (self.best, self.report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ema_update_is_exact_convex_combination() {
        let mut ema = vec![Tensor::row_vector(vec![1.0, 2.0])];
        let p = vec![Tensor::row_vector(vec![3.0, -1.0])];
        ema_update(&mut ema, &p, 0.75);
        assert_eq!(ema[0].data(), &[0.75 * 1.0 + 0.25 * 3.0, 0.75 * 2.0 + 0.25 * -1.0]);
    }

    #[test]
    fn lognormal_times_stay_in_range() {
        let t = lognormal_times(10_000, -1.2, 3.0, &mut RandomStream::new(0, 0));
        assert!(t.iter().all(|&v| (EPS..=T_MAX).contains(&v)));
    }

    #[test]
    fn report_csv_has_one_row_per_iteration() {
        let r = TrainReport {
            losses: vec![1.0, 0.5, 0.25],
            grad_norms: vec![2.0, 1.0, 0.5],
            evals: vec![(0, 3.0), (2, 1.0)],
            ..TrainReport::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        r.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.lines().nth(3).unwrap().ends_with(",1e0"));
    }
}
