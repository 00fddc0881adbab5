//! Parameterized time grids and their tuning by forward-KL minimization.

use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::is_engine::TimeGrid;
use crate::models::FlowMap;
use crate::numerics::{AdamState, RandomStream, Tape, Tensor, Var};
use crate::sampling::noise;
use crate::targets::{Target, TargetSampler};
use crate::{EPS, T_MAX};

/// How proposal times are derived from the other two sequences.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ProposalMode {
    /// Proposal variance equals target variance wherever the `eps` floor
    /// allows; `t_0` follows from the same matching.
    #[default]
    VarianceMatched,
    /// Free proposal fractions `prop_n = gamma_n (t_n - eps) + eps`; `t_0`
    /// comes from its own `mu_0`.
    Free { raw_gamma: Vec<f64> },
}

/// Unconstrained grid parameters; a sigmoid maps them into `(0, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub raw_mu: Vec<f64>,
    pub raw_eta: Vec<f64>,
    #[serde(default)]
    pub mode: ProposalMode,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl ScheduleParams {
    /// All raw parameters zero, i.e. every fraction at one half.
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("a grid needs N >= 1".into()));
        }
        Ok(Self {
            raw_mu: vec![0.0; n],
            raw_eta: vec![0.0; n],
            mode: ProposalMode::VarianceMatched,
        })
    }

    /// Parameters reproducing the interior times of `times` (length N+1,
    /// ending at T) with a common target fraction `eta`.
    pub fn from_times(times: &[f64], eta: f64) -> Result<Self> {
        let n = times.len().saturating_sub(1);
        if n == 0 || !(0.0 < eta && eta < 1.0) {
            return Err(Error::Config("need N >= 1 and eta in (0, 1)".into()));
        }
        let mut raw_mu = vec![0.0; n];
        for k in 1..n {
            let mu = (times[k] - EPS) / (times[k + 1] - EPS);
            if !(0.0 < mu && mu < 1.0) {
                return Err(Error::Config(format!("times not increasing above eps at {k}")));
            }
            raw_mu[k] = logit(mu);
        }
        Ok(Self {
            raw_mu,
            raw_eta: vec![logit(eta); n],
            mode: ProposalMode::VarianceMatched,
        })
    }

    pub fn steps(&self) -> usize {
        self.raw_mu.len()
    }

    pub fn mu(&self) -> Vec<f64> {
        self.raw_mu.iter().map(|&v| sigmoid(v)).collect()
    }

    pub fn eta(&self) -> Vec<f64> {
        self.raw_eta.iter().map(|&v| sigmoid(v)).collect()
    }

    fn check(&self) -> Result<()> {
        let n = self.steps();
        if n == 0 || self.raw_eta.len() != n {
            return Err(Error::Config(format!(
                "need N >= 1 and matching lengths, got {} mu and {} eta",
                n,
                self.raw_eta.len()
            )));
        }
        if let ProposalMode::Free { raw_gamma } = &self.mode {
            if raw_gamma.len() != n {
                return Err(Error::Config(format!("{} gamma for N = {n}", raw_gamma.len())));
            }
        }
        Ok(())
    }

    fn tensors(&self) -> Vec<Tensor> {
        let mut v = vec![
            Tensor::row_vector(self.raw_mu.clone()),
            Tensor::row_vector(self.raw_eta.clone()),
        ];
        if let ProposalMode::Free { raw_gamma } = &self.mode {
            v.push(Tensor::row_vector(raw_gamma.clone()));
        }
        v
    }

    fn with_tensors(&self, t: &[Tensor]) -> Self {
        let mut out = self.clone();
        out.raw_mu = t[0].data().to_vec();
        out.raw_eta = t[1].data().to_vec();
        if let ProposalMode::Free { raw_gamma } = &mut out.mode {
            *raw_gamma = t[2].data().to_vec();
        }
        out
    }
}

/// Grid times as scalar tape variables.
pub struct GridVars<'t> {
    pub t: Vec<Var<'t>>,
    pub tar: Vec<Var<'t>>,
    pub prop: Vec<Var<'t>>,
}

impl GridVars<'_> {
    pub fn to_grid(&self) -> Result<TimeGrid> {
        let f = |v: &[Var]| v.iter().map(|x| x.item()).collect::<Vec<_>>();
        TimeGrid::new(f(&self.t), f(&self.tar), f(&self.prop))
    }
}

fn col<'t>(v: Var<'t>, k: usize) -> Var<'t> {
    v.gather_cols(Rc::from([k]))
}

/// Differentiable grid construction; `raw` holds `[raw_mu, raw_eta]` and,
/// in free mode, `raw_gamma`, each `[1, N]`.
pub fn grid_vars<'t>(tape: &'t Tape, raw: &[Var<'t>], mode: &ProposalMode) -> GridVars<'t> {
    let n = raw[0].cols();
    let mu = raw[0].sigmoid();
    let eta = raw[1].sigmoid();
    let e2 = EPS * EPS;
    let mut t = vec![tape.scalar(T_MAX); n + 1];
    for k in (1..n).rev() {
        t[k] = col(mu, k) * (t[k + 1] - EPS) + EPS;
    }
    let mut tar = vec![tape.scalar(0.0); n];
    let mut prop = vec![tape.scalar(EPS); n];
    for k in 1..n {
        tar[k] = (t[k + 1] - t[k]) * col(eta, k) + t[k];
    }
    match mode {
        ProposalMode::VarianceMatched => {
            for k in 1..n {
                prop[k] = (t[k].square() + tar[k].square() - t[k + 1].square()).max_const(e2).sqrt();
            }
            // t_0 and tar_0 depend on each other; with tar_0 = (1 - eta) t_0
            // + eta t_1 the matching condition t_0^2 + tar_0^2 = t_1^2 + eps^2
            // is a quadratic in t_0. Its positive root, in cancellation-free
            // form, seeds the literal clamp formula.
            let e0 = col(eta, 0);
            let one_minus = -e0 + 1.0;
            let a = one_minus.square() + 1.0;
            let b = e0 * one_minus * t[1] * 2.0;
            let neg_c = (-e0.square() + 1.0) * t[1].square() + e2;
            let root = (b.square() + a * neg_c * 4.0).sqrt();
            let t0 = neg_c * 2.0 / (b + root);
            tar[0] = one_minus * t0 + e0 * t[1];
            t[0] = (t[1].square() - tar[0].square() + e2).max_const(e2).sqrt().min(tar[0]);
        }
        ProposalMode::Free { .. } => {
            let gamma = raw[2].sigmoid();
            t[0] = col(mu, 0) * (t[1] - EPS) + EPS;
            tar[0] = (t[1] - t[0]) * col(eta, 0) + t[0];
            for k in 1..n {
                prop[k] = col(gamma, k) * (t[k] - EPS) + EPS;
            }
        }
    }
    GridVars { t, tar, prop }
}

/// Maps parameters to a validated grid.
pub fn build_time_grid(params: &ScheduleParams) -> Result<TimeGrid> {
    params.check()?;
    let tape = Tape::new();
    let raw: Vec<Var> = params.tensors().into_iter().map(|t| tape.constant(t)).collect();
    grid_vars(&tape, &raw, &params.mode).to_grid()
}

/// Target samples and path noise for one objective evaluation.
#[derive(Clone, Debug)]
pub struct PathNoise {
    pub x0: Tensor,
    /// Mean `log π̄(x_0)`, constant in the parameters.
    pub log_pi: f64,
    /// `z[n-1]` drives the target kernel into `x_{t_n}`.
    pub z: Vec<Tensor>,
}

impl PathNoise {
    pub fn draw(
        sampler: &TargetSampler,
        target: &Target,
        n: usize,
        m: usize,
        rng: &mut RandomStream,
    ) -> Result<Self> {
        let x0 = sampler.draw(m, rng)?;
        let lp = target.log_density_rows(&x0)?;
        let log_pi = lp.iter().sum::<f64>() / m as f64;
        let z = (0..n).map(|_| noise(m, target.dim(), target.layout(), rng)).collect();
        Ok(Self { x0, log_pi, z })
    }
}

fn log_normal_var<'t>(x: Var<'t>, mean: Var<'t>, var: Var<'t>, dim: usize) -> Var<'t> {
    let sq = (x - mean).square().sum_cols();
    (var * (2.0 * std::f64::consts::PI)).ln() * (-0.5 * dim as f64) - sq / (var * 2.0)
}

/// Mean of `log target-joint - log proposal-joint` over paths rolled forward
/// through the target kernels from `noise.x0`.
pub fn forward_kl_var<'t, M: FlowMap + ?Sized>(
    tape: &'t Tape,
    model: &M,
    g: &GridVars<'t>,
    noise: &PathNoise,
    dim: usize,
) -> Result<Var<'t>> {
    let n = g.t.len() - 1;
    if noise.z.len() != n {
        return Err(Error::Shape(format!("{} noise draws for N = {n}", noise.z.len())));
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut xs = vec![tape.constant(noise.x0.clone())];
    let mut log_q = tape.scalar(0.0);
    for k in 1..=n {
        let var = g.t[k].square() - g.tar[k - 1].square();
        let mean = model.traverse_var(tape, xs[k - 1], g.t[k - 1], g.tar[k - 1])?;
        let z = tape.constant(noise.z[k - 1].clone());
        xs.push(mean + z * var.sqrt());
        let zz = noise.z[k - 1].sq_norm() / noise.x0.rows() as f64;
        log_q = log_q + (var * two_pi).ln() * (-0.5 * dim as f64) - zz * 0.5;
    }
    let zeros = tape.constant(Tensor::zeros(&[1, noise.x0.cols()]));
    let prior = tape.scalar(T_MAX * T_MAX);
    let mut log_p = log_normal_var(xs[n], zeros, prior, dim).mean();
    for k in (1..=n).rev() {
        let var = g.t[k - 1].square() - g.prop[k - 1].square();
        let mean = model.traverse_var(tape, xs[k], g.t[k], g.prop[k - 1])?;
        log_p = log_p + log_normal_var(xs[k - 1], mean, var, dim).mean();
    }
    Ok(log_q - log_p + noise.log_pi)
}

/// Forward-KL estimate (up to the log normalizer of π) from M target paths.
pub fn forward_kl_objective<M: FlowMap + ?Sized>(
    params: &ScheduleParams,
    model: &M,
    target: &Target,
    sampler: &TargetSampler,
    m: usize,
    rng: &mut RandomStream,
) -> Result<f64> {
    params.check()?;
    let noise = PathNoise::draw(sampler, target, params.steps(), m, rng)?;
    evaluate(params, model, target, &noise)
}

fn evaluate<M: FlowMap + ?Sized>(params: &ScheduleParams, model: &M, target: &Target, noise: &PathNoise) -> Result<f64> {
    let tape = Tape::new();
    let raw: Vec<Var> = params.tensors().into_iter().map(|t| tape.constant(t)).collect();
    let g = grid_vars(&tape, &raw, &params.mode);
    g.to_grid()?;
    Ok(forward_kl_var(&tape, model, &g, noise, target.density_dim())?.item())
}

/// Per-path values of the objective, for Monte Carlo error bars.
pub fn forward_kl_terms<M: FlowMap + ?Sized>(
    params: &ScheduleParams,
    model: &M,
    target: &Target,
    sampler: &TargetSampler,
    m: usize,
    rng: &mut RandomStream,
) -> Result<Vec<f64>> {
    params.check()?;
    let noise = PathNoise::draw(sampler, target, params.steps(), m, rng)?;
    (0..m)
        .map(|i| {
            let one = PathNoise {
                x0: noise.x0.select_rows(&[i]),
                log_pi: target.unnorm_log_density(noise.x0.row(i))?,
                z: noise.z.iter().map(|z| z.select_rows(&[i])).collect(),
            };
            evaluate(params, model, target, &one)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneConfig {
    pub steps: usize,
    pub paths: usize,
    pub learning_rate: f64,
    /// Objective re-evaluation period on the fixed evaluation batch.
    pub eval_every: usize,
    pub eval_paths: usize,
    pub seed: u64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            paths: 256,
            learning_rate: 0.05,
            eval_every: 10,
            eval_paths: 2048,
            seed: 0,
        }
    }
}

/// Tuned parameters with the objective trace on the evaluation batch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TunedGrid {
    pub params: ScheduleParams,
    pub grid: TimeGrid,
    pub grid_hash: String,
    pub initial_objective: f64,
    pub best_objective: f64,
    pub trace: Vec<(usize, f64)>,
}

impl TunedGrid {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let g: Self = serde_json::from_str(&s)?;
        g.grid.validate()?;
        Ok(g)
    }
}

/// Adam on the raw parameters with fresh reparameterized paths each step;
/// returns the best parameters seen on a fixed evaluation batch.
pub fn tune_grid<M: FlowMap + ?Sized>(
    params0: &ScheduleParams,
    model: &M,
    target: &Target,
    sampler: &TargetSampler,
    config: &TuneConfig,
) -> Result<TunedGrid> {
    params0.check()?;
    if config.paths == 0 || config.eval_paths == 0 || config.eval_every == 0 {
        return Err(Error::Config("paths, eval_paths and eval_every must be positive".into()));
    }
    let n = params0.steps();
    let dim = target.density_dim();
    let root = RandomStream::new(config.seed, 0x7475_6e65);
    let eval_noise = PathNoise::draw(sampler, target, n, config.eval_paths, &mut root.substream(u64::MAX))?;
    let initial = evaluate(params0, model, target, &eval_noise)?;
    let mut best = (initial, params0.clone());
    let mut trace = vec![(0, initial)];
    let mut raw = params0.tensors();
    let mut adam = AdamState::new(&raw, config.learning_rate);
    let mut last_valid = raw.clone();
    for step in 1..=config.steps {
        let batch = PathNoise::draw(sampler, target, n, config.paths, &mut root.substream(step as u64))?;
        let tape = Tape::new();
        let vars: Vec<Var> = raw.iter().map(|t| tape.var(t.clone())).collect();
        let g = grid_vars(&tape, &vars, &params0.mode);
        if g.to_grid().is_err() {
            // Only reachable when an update left the valid region: undo it
            // and retry with a smaller step.
            raw = last_valid.clone();
            adam.learning_rate *= 0.5;
            log::warn!("tune step {step}: invalid grid, lr now {}", adam.learning_rate);
            continue;
        }
        last_valid = raw.clone();
        let obj = forward_kl_var(&tape, model, &g, &batch, dim)?;
        if !obj.item().is_finite() {
            return Err(Error::Tuning {
                step: step as u64,
                message: format!("objective is {}", obj.item()),
            });
        }
        let grads = tape.backward(obj)?;
        let gs: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
        adam.step(&mut raw, &gs).map_err(|e| Error::Tuning {
            step: step as u64,
            message: e.to_string(),
        })?;
        if step % config.eval_every == 0 || step == config.steps {
            let cand = params0.with_tensors(&raw);
            match evaluate(&cand, model, target, &eval_noise) {
                Ok(v) if v.is_finite() => {
                    trace.push((step, v));
                    if v < best.0 {
                        best = (v, cand);
                    }
                }
                Ok(v) => {
                    return Err(Error::Tuning {
                        step: step as u64,
                        message: format!("evaluation objective is {v}"),
                    })
                }
                Err(Error::Grid { .. }) => {}
                Err(e) => return Err(e),
            }
        }
    }
    let grid = build_time_grid(&best.1)?;
    Ok(TunedGrid {
        grid_hash: grid.hash(),
        grid,
        params: best.1,
        initial_objective: initial,
        best_objective: best.0,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::GaussianFlow;
    use crate::numerics::{finite_difference_check_multi, mean_and_se};
    use crate::targets::GmmTarget;

    #[test]
    fn single_step_matches_hand_substitution() {
        let p = ScheduleParams {
            raw_mu: vec![1.3],
            raw_eta: vec![0.0],
            mode: ProposalMode::VarianceMatched,
        };
        let g = build_time_grid(&p).unwrap();
        // eta = 1/2: 1.25 t0^2 + 40 t0 + 1600 - 6400 - eps^2 = 0.
        let t0 = (-40.0 + (1600.0f64 + 5.0 * (4800.0 + EPS * EPS)).sqrt()) / 2.5;
        assert!((g.t[0] - t0).abs() < 1e-10);
        assert!((g.tar[0] - ((T_MAX - g.t[0]) * 0.5 + g.t[0])).abs() < 1e-10);
        let eq13 = (T_MAX * T_MAX - g.tar[0] * g.tar[0] + EPS * EPS).max(EPS * EPS).sqrt().min(g.tar[0]);
        assert!((g.t[0] - eq13).abs() < 1e-10);
        assert_eq!(g.prop, vec![EPS]);
    }

    #[test]
    fn variance_matching_identity_when_unclamped() {
        let p = ScheduleParams {
            raw_mu: vec![0.0, -1.0, 0.5, 2.0, 0.0],
            raw_eta: vec![-1.0, 0.3, 1.0, 2.0, 0.5],
            mode: ProposalMode::VarianceMatched,
        };
        let g = build_time_grid(&p).unwrap();
        for k in 1..=5 {
            if g.prop[k - 1] > EPS {
                let lhs = g.target_variance(k);
                let rhs = g.proposal_variance(k);
                assert!((lhs - rhs).abs() < 1e-9 * lhs.max(1.0), "k={k}: {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn near_one_fractions_stay_ordered() {
        let p = ScheduleParams {
            raw_mu: vec![12.0; 4],
            raw_eta: vec![0.0; 4],
            mode: ProposalMode::VarianceMatched,
        };
        let g = build_time_grid(&p).unwrap();
        assert!(g.t.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn fuzz_random_params_give_valid_grids_or_grid_errors() {
        let mut r = RandomStream::new(11, 0);
        let mut ok = 0;
        for i in 0..10_000 {
            let n = 1 + r.below(12);
            let draw = |r: &mut RandomStream| (0..n).map(|_| (r.uniform() - 0.5) * 24.0).collect::<Vec<_>>();
            let mode = if i % 4 == 0 {
                ProposalMode::Free { raw_gamma: draw(&mut r) }
            } else {
                ProposalMode::VarianceMatched
            };
            let p = ScheduleParams {
                raw_mu: draw(&mut r),
                raw_eta: draw(&mut r),
                mode,
            };
            match build_time_grid(&p) {
                Ok(g) => {
                    g.validate().unwrap();
                    ok += 1;
                }
                Err(Error::Grid { .. }) => {}
                Err(e) => panic!("unexpected error {e}"),
            }
        }
        assert!(ok > 9000, "only {ok} valid grids");
    }

    #[test]
    fn from_times_reproduces_interior_times() {
        let times = crate::sampling::log_schedule(5, EPS, T_MAX).unwrap().times().to_vec();
        let g = build_time_grid(&ScheduleParams::from_times(&times, 0.2).unwrap()).unwrap();
        for k in 1..5 {
            assert!((g.t[k] / times[k] - 1.0).abs() < 1e-10);
        }
    }

    fn gaussian_setup() -> (GaussianFlow, Target, TargetSampler) {
        let t = Target::Gmm(GmmTarget::gaussian(vec![0.0, 0.0], 0.25).unwrap());
        (GaussianFlow::new(vec![0.0, 0.0], 0.25).unwrap(), t.clone(), TargetSampler::Exact(t))
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let (f, target, sampler) = gaussian_setup();
        let p = ScheduleParams {
            raw_mu: vec![0.0, 0.3, -0.2, 0.5],
            raw_eta: vec![-1.0, 0.4, 0.1, -0.3],
            mode: ProposalMode::VarianceMatched,
        };
        let noise = PathNoise::draw(&sampler, &target, 4, 16, &mut RandomStream::new(0, 0)).unwrap();
        let err = finite_difference_check_multi(
            |tape, raw| {
                let g = grid_vars(tape, raw, &ProposalMode::VarianceMatched);
                forward_kl_var(tape, &f, &g, &noise, 2).unwrap()
            },
            &p.tensors(),
            8,
            &mut RandomStream::new(1, 0),
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn small_and_large_path_counts_agree() {
        let (f, target, sampler) = gaussian_setup();
        let p = ScheduleParams::uniform(3).unwrap();
        let terms = forward_kl_terms(&p, &f, &target, &sampler, 2000, &mut RandomStream::new(2, 0)).unwrap();
        let (m, se) = mean_and_se(&terms);
        let one = forward_kl_objective(&p, &f, &target, &sampler, 1, &mut RandomStream::new(3, 0)).unwrap();
        let sd = se * (terms.len() as f64).sqrt();
        assert!((one - m).abs() < 4.0 * (sd * sd + se * se).sqrt());
    }

    #[test]
    fn zero_steps_returns_initial_params() {
        let (f, target, sampler) = gaussian_setup();
        let p = ScheduleParams::uniform(2).unwrap();
        let cfg = TuneConfig {
            steps: 0,
            eval_paths: 64,
            ..TuneConfig::default()
        };
        let out = tune_grid(&p, &f, &target, &sampler, &cfg).unwrap();
        assert_eq!(out.params, p);
        assert_eq!(out.best_objective, out.initial_objective);
    }

    #[test]
    fn tuning_is_deterministic_and_never_worse() {
        let (f, target, sampler) = gaussian_setup();
        let p = ScheduleParams::uniform(3).unwrap();
        let cfg = TuneConfig {
            steps: 40,
            paths: 64,
            eval_every: 5,
            eval_paths: 256,
            ..TuneConfig::default()
        };
        let a = tune_grid(&p, &f, &target, &sampler, &cfg).unwrap();
        let b = tune_grid(&p, &f, &target, &sampler, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert!(a.best_objective <= a.initial_objective);
    }

    #[test]
    fn tuned_gaussian_grid_is_nearly_exact() {
        let (f, target, sampler) = gaussian_setup();
        let p = ScheduleParams::uniform(3).unwrap();
        let out = tune_grid(&p, &f, &target, &sampler, &TuneConfig::default()).unwrap();
        let e = crate::is_engine::bctm_is(&f, &target, &out.grid, 10_000, &mut RandomStream::new(1, 0)).unwrap();
        assert!(crate::is_engine::ess(&e).unwrap() / 1e4 > 0.99);
    }
}
