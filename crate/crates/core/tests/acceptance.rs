//! Acceptance criteria, one test each. Every test writes a single
//! `criterion N [PASS|FAIL]` line to stderr before asserting.
//!
//! The GMM-2D criteria need a trained denoiser, a distilled trajectory model
//! and tuned grids. They are produced through the command-line front end on
//! first use and cached under `CARGO_TARGET_TMPDIR/acceptance`, so a cold run
//! takes about an hour on one core and later runs take a few minutes.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};

use cmis::harness::checks::{dw_kernel_cog, egnn_equivariance};
use cmis::harness::{
    cli, grid_for, run_alignment_study, run_ess_curve, run_integral_table, EssSummary, ExperimentConfig,
    IntegralSummary, Models, Pipeline,
};
use cmis::is_engine::{baseline_ddpm_is, bctm_is, TimeGrid};
use cmis::models::{Architecture, Denoiser, DenoiserFn, GaussianFlow, GmmDenoiser, TrajectoryModel};
use cmis::numerics::{finite_difference_check_multi, RandomStream, Tensor, Var};
use cmis::sampling::{ddim_step, log_schedule};
use cmis::schedule_opt::{forward_kl_var, grid_vars, PathNoise, ProposalMode, ScheduleParams};
use cmis::targets::{GmmTarget, Target, TargetSampler};
use cmis::training::{ctm_loss_var, dsm_loss_var, OdeFlow};
use cmis::{EPS, T_MAX};

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    // Written past the test harness's capture so the line always shows.
    let line = format!("criterion {n} [{}] {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn ess_fraction(log_w: &[f64]) -> f64 {
    let m = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|v| v * v).sum();
    s * s / s2 / log_w.len() as f64
}

fn variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn cache_dir(name: &str) -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name)
}

/// Runs a CLI command with `--out` pointed at the cache.
fn cli_step(cmd: &str, config: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec![
        "cmis".to_string(),
        cmd.to_string(),
        "--config".into(),
        config.display().to_string(),
        "--out".into(),
        out.display().to_string(),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    assert_eq!(cli::run(args), 0, "cmis {cmd} failed");
}

/// Loads `config` with outputs redirected to the cache, training the
/// denoiser, distilling the trajectory model and tuning grids for `nfe` as
/// needed.
fn prepared(config: &str, nfe: &[usize]) -> ExperimentConfig {
    // Serializes preparation across tests sharing one cache.
    static LOCK: Mutex<()> = Mutex::new(());
    let _guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let path = config_path(config);
    let out = cache_dir(config.trim_end_matches(".toml"));
    let mut cfg = ExperimentConfig::load(&path).unwrap();
    cfg.output_dir = out.clone();
    if !cfg.denoiser_path().exists() {
        cli_step("train-dm", &path, &out, &[]);
    }
    if !cfg.bctm_path().exists() {
        cli_step("distill-bctm", &path, &out, &[]);
    }
    let missing: Vec<String> = nfe
        .iter()
        .filter(|&&b| !cfg.grid_dir().join(format!("grid_n{}.json", b / 2)).exists())
        .map(|b| b.to_string())
        .collect();
    if !missing.is_empty() {
        cli_step("tune-grid", &path, &out, &["--nfe", &missing.join(",")]);
    }
    cfg
}

struct Gmm2d {
    integrals: Vec<IntegralSummary>,
    ess: Vec<EssSummary>,
}

fn gmm2d() -> &'static Gmm2d {
    static CELL: OnceLock<Gmm2d> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut cfg = prepared("gmm40_2d.toml", &[12, 24, 50, 100]);
        cfg.seeds = (0..5).collect();
        cfg.k = 10_000;
        cfg.pipelines = vec![Pipeline::DdpmIs, Pipeline::BctmIs];
        cfg.table.ddpm_nfe = 100;
        cfg.table.bctm_nfe = 12;
        let target = cfg.target().unwrap();
        let models = Models::load(&cfg, &target, &cfg.pipelines).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (_, integrals) = run_integral_table(&cfg, &target, &models, dir.path()).unwrap();
        let (_, ess) = run_ess_curve(&cfg, &target, &models, &[12, 24, 50, 100], dir.path()).unwrap();
        Gmm2d { integrals, ess }
    })
}

fn ess_at<'a>(s: &'a [EssSummary], pipeline: &str, nfe: usize) -> &'a EssSummary {
    s.iter().find(|r| r.pipeline == pipeline && r.nfe == nfe).unwrap()
}

fn integral<'a>(s: &'a [IntegralSummary], pipeline: &str) -> &'a IntegralSummary {
    s.iter().find(|r| r.pipeline == pipeline).unwrap()
}

/// Grid matched to `N(0, v I)` under its exact flow: target times halfway,
/// proposal times from matching flow-transformed variances.
fn matched_grid(n: usize, v: f64) -> TimeGrid {
    let mut t = log_schedule(n, EPS, T_MAX).unwrap().times().to_vec();
    t[0] = (2.0 * EPS).min(0.5 * (EPS + t[1]));
    TimeGrid::gaussian_matched(t, &vec![0.5; n], v).unwrap()
}

#[test]
fn criterion_01_gaussian_exactness() {
    let v = 0.25;
    let flow = GaussianFlow::new(vec![0.0; 2], v).unwrap();
    let target = Target::Gmm(GmmTarget::gaussian(vec![0.0; 2], v).unwrap());
    let mut details = Vec::new();
    let mut pass = true;
    for n in [1, 3, 6] {
        let e = bctm_is(&flow, &target, &matched_grid(n, v), 10_000, &mut RandomStream::new(11, n as u64)).unwrap();
        let var = variance(&e.log_weights);
        let frac = ess_fraction(&e.log_weights);
        pass &= var < 1e-8 && frac > 0.999;
        details.push(format!("N={n}: var {var:.1e}, ESS/K {frac:.6}"));
    }
    report(1, "Gaussian exactness", pass, &details.join("; "));
}

#[test]
fn criterion_02_baseline_self_consistency() {
    let v = 0.25;
    let denoiser = GaussianFlow::new(vec![0.0; 2], v).unwrap();
    let target = Target::Gmm(GmmTarget::gaussian(vec![0.0; 2], v).unwrap());
    let sch = log_schedule(20, EPS, T_MAX).unwrap();
    let k = 10_000;
    let e = baseline_ddpm_is(&denoiser, &target, &sch, 1.0, k, &mut RandomStream::new(12, 0)).unwrap();
    let m = e.log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = e.log_weights.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = w.iter().sum();
    let worst = w.iter().map(|x| (x / s * k as f64 - 1.0).abs()).fold(0.0, f64::max);
    let frac = ess_fraction(&e.log_weights);
    report(
        2,
        "baseline self-consistency",
        worst < 0.01 && frac > 0.99,
        &format!("max |K w - 1| {worst:.3e}, ESS/K {frac:.4}"),
    );
}

#[test]
fn criterion_03_bias_correction_gmm2d() {
    let s = &gmm2d().integrals;
    let mc = integral(s, "ddpm_mc");
    let ddpm = integral(s, "ddpm_is");
    let bctm = integral(s, "bctm_is");
    let pass = mc.z.abs() > 3.0 && ddpm.z.abs() <= 3.0 && bctm.z.abs() <= 3.0;
    report(
        3,
        "bias correction on GMM-2D",
        pass,
        &format!(
            "oracle {:.4} ± {:.4}; DDPM(100)+MC {:.4} (z {:.1}); DDPM(100)+IS {:.4} (z {:.1}); BCTM(12)+IS {:.4} (z {:.1})",
            mc.oracle_mean, mc.oracle_se, mc.mean, mc.z, ddpm.mean, ddpm.z, bctm.mean, bctm.z
        ),
    );
}

#[test]
fn criterion_04_nfe_reduction() {
    let s = &gmm2d().ess;
    let b = ess_at(s, "bctm_is", 12);
    let d = ess_at(s, "ddpm_is", 100);
    report(
        4,
        "NFE reduction",
        b.mean > d.mean,
        &format!(
            "BCTM(12) ESS {:.3}% [q1 {:.3}, q3 {:.3}] vs DDPM(100) ESS {:.3}% [q1 {:.3}, q3 {:.3}]",
            b.mean, b.q1, b.q3, d.mean, d.q1, d.q3
        ),
    );
}

#[test]
fn criterion_05_alternating_alignment() {
    let path = config_path("gmm2_alignment.toml");
    let mut cfg = ExperimentConfig::load(&path).unwrap();
    cfg.seeds = (0..5).collect();
    cfg.alignment.steps = vec![3];
    let target = cfg.target().unwrap();
    let sampler = TargetSampler::Exact(target.clone());
    let flow = OdeFlow {
        denoiser: GmmDenoiser {
            target: target.as_gmm().unwrap().clone(),
        },
        substeps: cfg.alignment.substeps,
    };
    let dir = tempfile::tempdir().unwrap();
    let rows = run_alignment_study(&cfg, &sampler, &flow, |n| grid_for(&cfg, n), dir.path()).unwrap();
    let mut wins = 0;
    let mut joint_wins = 0;
    let mut details = Vec::new();
    for &seed in &cfg.seeds {
        let get = |d: &str| rows.iter().find(|r| r.design == d && r.seed == seed).unwrap();
        let (alt, sde) = (get("alternating"), get("sde_only"));
        wins += usize::from(alt.total_w1 < sde.total_w1);
        joint_wins += usize::from(alt.joint_w1 < sde.joint_w1);
        details.push(format!("{:.3}/{:.3}", alt.total_w1, sde.total_w1));
    }
    // Gated on the summed marginal score; the joint score is informational.
    report(
        5,
        "alternating design alignment",
        wins == cfg.seeds.len(),
        &format!(
            "{wins}/5 seeds, alternating/SDE-only marginal W1: {}; sliced joint W1 lower on {joint_wins}/5",
            details.join(" ")
        ),
    );
}

#[test]
fn criterion_06_ess_plateau() {
    let s = &gmm2d().ess;
    let (b24, b50) = (ess_at(s, "bctm_is", 24).mean, ess_at(s, "bctm_is", 50).mean);
    let (d50, d100) = (ess_at(s, "ddpm_is", 50).mean, ess_at(s, "ddpm_is", 100).mean);
    let rel = (b50 - b24) / b24;
    report(
        6,
        "ESS plateau",
        rel < 0.25 && d100 > d50,
        &format!("BCTM ESS 24 -> 50 NFE: {b24:.3}% -> {b50:.3}% ({:+.1}%); DDPM 50 -> 100: {d50:.3}% -> {d100:.3}%", 100.0 * rel),
    );
}

#[test]
fn criterion_07_equivariance() {
    let dev = egnn_equivariance(100, 7).unwrap();
    let cog = dw_kernel_cog(7).unwrap();
    report(
        7,
        "equivariance suite",
        dev < 1e-5 && cog < 1e-12,
        &format!("max equivariance deviation {dev:.2e}, max |CoG| {cog:.2e}"),
    );
}

#[test]
fn criterion_08_ddim_euler_identity() {
    let d = Denoiser::new(Architecture::mlp(3, vec![32, 32], 8, 1), 1.5, &mut RandomStream::new(8, 0)).unwrap();
    let mut rng = RandomStream::new(8, 1);
    let mut worst: f64 = 0.0;
    for (t, u) in [(80.0, 40.0), (2.5, 1.0), (0.3, 0.002), (10.0, 9.99)] {
        let x = rng.normal_tensor(1000, 3).scale(t);
        let got = ddim_step(&d, &x, t, u, 0.0, &mut rng).unwrap();
        let den = d.denoise(&x, t).unwrap();
        for i in 0..x.rows() {
            for j in 0..3 {
                let (xv, dv) = (x.row(i)[j], den.row(i)[j]);
                let euler = xv + (u - t) * (xv - dv) / t;
                worst = worst.max((got.row(i)[j] - euler).abs() / (1.0 + euler.abs()));
            }
        }
    }
    report(8, "DDIM/Euler identity", worst < 1e-10, &format!("max relative difference {worst:.2e}"));
}

#[test]
fn criterion_09_gradient_checks() {
    let mut rng = RandomStream::new(9, 0);
    let n = 16;
    let x0 = rng.normal_tensor(n, 2).scale(0.7);
    let z = rng.normal_tensor(n, 2);
    let t: Vec<f64> = (0..n).map(|_| (-1.2 + 1.2 * rng.normal()).exp()).collect();

    let d = Denoiser::new(Architecture::mlp(2, vec![32, 32], 8, 1), 0.7, &mut RandomStream::new(9, 1)).unwrap();
    let dsm = finite_difference_check_multi(
        |tape, p| dsm_loss_var(tape, &x0, &z, &t, 0.7, |x, tt| d.denoise_var(tape, p, x, tt)),
        &d.net.params,
        100,
        &mut rng,
        1e-6,
        1e-8,
    )
    .unwrap();

    let m = TrajectoryModel::new(Architecture::mlp(2, vec![32, 32], 8, 2), 0.7, &mut RandomStream::new(9, 2)).unwrap();
    let s: Vec<f64> = t.iter().map(|&tt| tt * (0.1 + 0.8 * rng.uniform())).collect();
    let mut x_t = x0.clone();
    for (i, &ti) in t.iter().enumerate() {
        for (a, b) in x_t.row_mut(i).iter_mut().zip(z.row(i)) {
            *a += ti * b;
        }
    }
    let goal = rng.normal_tensor(n, 2).scale(0.5);
    let frozen = m.net.params.clone();
    let ctm = finite_difference_check_multi(
        |tape, p| {
            let c: Vec<Var> = frozen.iter().map(|f| tape.constant(f.clone())).collect();
            ctm_loss_var(tape, &m, p, &c, &x_t, &t, &s, &goal)
        },
        &m.net.params,
        100,
        &mut rng,
        1e-6,
        1e-8,
    )
    .unwrap();

    let target = Target::Gmm(GmmTarget::gaussian(vec![0.3, -0.2], 0.5).unwrap());
    let sampler = TargetSampler::Exact(target.clone());
    let noise = PathNoise::draw(&sampler, &target, 4, 16, &mut RandomStream::new(9, 3)).unwrap();
    let params = ScheduleParams {
        raw_mu: vec![0.1, 0.4, -0.3, 0.2],
        raw_eta: vec![1.5, 2.0, 1.0, 2.5],
        mode: ProposalMode::VarianceMatched,
    };
    let raw = vec![Tensor::matrix(1, 4, params.raw_mu.clone()), Tensor::matrix(1, 4, params.raw_eta.clone())];
    let kl = finite_difference_check_multi(
        |tape, r| {
            let g = grid_vars(tape, r, &ProposalMode::VarianceMatched);
            forward_kl_var(tape, &m, &g, &noise, 2).unwrap()
        },
        &raw,
        100,
        &mut rng,
        1e-6,
        1e-6,
    )
    .unwrap();
    report(
        9,
        "gradient checks",
        dsm < 1e-4 && ctm < 1e-4 && kl < 1e-4,
        &format!("worst relative error: DSM {dsm:.1e}, CTM {ctm:.1e}, forward KL {kl:.1e}"),
    );
}

#[test]
#[ignore = "stretch: hours of training on one core"]
fn criterion_10_dw4_stretch() {
    let mut cfg = prepared("dw4.toml", &[24]);
    cfg.seeds = (0..5).collect();
    cfg.k = 10_000;
    cfg.pipelines = vec![Pipeline::BctmIs];
    cfg.table.bctm_nfe = 24;
    let target = cfg.target().unwrap();
    let models = Models::load(&cfg, &target, &cfg.pipelines).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (_, s) = run_integral_table(&cfg, &target, &models, dir.path()).unwrap();
    let (is, mc) = (integral(&s, "bctm_is"), integral(&s, "bctm_mc"));
    report(
        10,
        "DW-4 stretch",
        is.z.abs() <= 3.0 && mc.z.abs() > 3.0,
        &format!(
            "MCMC oracle {:.4} ± {:.4}; BCTM(24)+MC {:.4} (z {:.1}); BCTM(24)+IS {:.4} (z {:.1})",
            is.oracle_mean, is.oracle_se, mc.mean, mc.z, is.mean, is.z
        ),
    );
}
