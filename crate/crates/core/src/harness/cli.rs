//! Command-line front end.
//!
//! Exit codes: 0 success, 2 usage error, 3 configuration or I/O error,
//! 4 any other failure (including a failed `verify`).

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use super::checks::verify_suite;
use super::*;
use crate::models::{Checkpoint, FlowMap, GmmDenoiser};
use crate::schedule_opt::tune_grid;
use crate::training::{distill_bctm, train_dsm, OdeFlow};

#[derive(Parser, Debug)]
#[command(name = "cmis", version, about = "Few-step unbiased Boltzmann sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Use seeds 0..N instead of the configured list.
    #[arg(long)]
    seeds: Option<u64>,
    /// Samples per run.
    #[arg(long)]
    k: Option<usize>,
    /// Comma-separated NFE budgets.
    #[arg(long, value_delimiter = ',')]
    nfe: Option<Vec<usize>>,
    /// Training or tuning iterations.
    #[arg(long)]
    iterations: Option<usize>,
    /// Output root, overriding `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a denoiser by denoising score matching.
    TrainDm(Common),
    /// Distill a trajectory model from a trained denoiser.
    DistillBctm(Common),
    /// Tune time grids for the trajectory model.
    TuneGrid(Common),
    /// Draw weighted samples from one pipeline.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "bctm_is")]
        pipeline: String,
    },
    /// ESS against NFE for every configured pipeline.
    EssCurve(Common),
    /// Oracle, unweighted and weighted integral estimates.
    IntegralTable(Common),
    /// Proposal-target joint alignment of the two target designs.
    AlignmentStudy(Common),
    /// Fast invariant checks.
    Verify,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(n) = self.seeds {
            cfg.seeds = (0..n).collect();
        }
        if let Some(k) = self.k {
            cfg.k = k;
        }
        if let Some(nfe) = &self.nfe {
            cfg.nfe = nfe.clone();
        }
        if let Some(it) = self.iterations {
            cfg.dsm.iterations = it;
            cfg.distill.iterations = it;
            cfg.tune.config.steps = it;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    if let Some(n) = std::env::var("CMIS_THREADS").ok().and_then(|s| s.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                3
            } else {
                4
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::TrainDm(c) => train_dm(&c.load()?),
        Command::DistillBctm(c) => distill(&c.load()?),
        Command::TuneGrid(c) => tune(&c.load()?),
        Command::Sample { common, pipeline } => sample(&common.load()?, Pipeline::parse(&pipeline)?),
        Command::EssCurve(c) => ess_curve(&c.load()?),
        Command::IntegralTable(c) => integral_table(&c.load()?),
        Command::AlignmentStudy(c) => alignment(&c.load()?),
        Command::Verify => Ok(verify()),
    }
}

fn finish(mut m: RunManifest, dir: &Path, outputs: &[&str]) -> Result<i32> {
    m.outputs = outputs.iter().map(|s| s.to_string()).collect();
    m.write(dir)?;
    println!("{}", dir.display());
    Ok(0)
}

fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    ck.save(path)
}

fn train_dm(cfg: &ExperimentConfig) -> Result<i32> {
    let target = cfg.target()?;
    let sampler = cfg.sampler(&target)?;
    let mut m = RunManifest::new("train-dm", cfg)?;
    let dir = fresh_run_dir(&cfg.output_dir, "train-dm")?;
    let (d, report) = train_dsm(cfg.new_denoiser(&target)?, &sampler, &cfg.dsm)?;
    report.write_csv(&dir.join("training.csv"))?;
    let ck = Checkpoint::from_denoiser(&d, m.config_hash.clone());
    let path = cfg.denoiser_path();
    save_checkpoint(&ck, &path)?;
    m.checkpoints.push((path.display().to_string(), ck.params_hash()));
    log::info!("best eval {:.5} at iteration {}", report.best_eval, report.best_iteration);
    finish(m, &dir, &["training.csv"])
}

fn distill(cfg: &ExperimentConfig) -> Result<i32> {
    let target = cfg.target()?;
    let sampler = cfg.sampler(&target)?;
    let (teacher, th) = cfg.load_denoiser(&target)?;
    let mut m = RunManifest::new("distill-bctm", cfg)?;
    m.checkpoints.push(("teacher".into(), th));
    let dir = fresh_run_dir(&cfg.output_dir, "distill-bctm")?;
    let student = crate::models::TrajectoryModel::warm_start(&teacher)?;
    let (s, report) = distill_bctm(student, &teacher, &sampler, &cfg.distill)?;
    report.write_csv(&dir.join("training.csv"))?;
    let ck = Checkpoint::from_trajectory(&s, m.config_hash.clone());
    let path = cfg.bctm_path();
    save_checkpoint(&ck, &path)?;
    m.checkpoints.push((path.display().to_string(), ck.params_hash()));
    log::info!("best eval {:.5} at iteration {}", report.best_eval, report.best_iteration);
    finish(m, &dir, &["training.csv"])
}

fn tune(cfg: &ExperimentConfig) -> Result<i32> {
    let target = cfg.target()?;
    let sampler = cfg.sampler(&target)?;
    let models = Models::load(cfg, &target, &[Pipeline::BctmIs])?;
    let model = models.bctm()?;
    let mut m = RunManifest::new("tune-grid", cfg)?;
    m.checkpoints = models.hashes();
    let dir = fresh_run_dir(&cfg.output_dir, "tune-grid")?;
    let grid_dir = cfg.grid_dir();
    std::fs::create_dir_all(&grid_dir).map_err(|e| Error::io(&grid_dir, e))?;
    let mut trace = String::from("steps,iteration,objective\n");
    for n in cfg.tune_steps() {
        let tuned = tune_grid(&untuned_params(n)?, model, &target, &sampler, &cfg.tune.config)?;
        log::info!("N={n}: objective {:.4} -> {:.4}", tuned.initial_objective, tuned.best_objective);
        for (it, v) in &tuned.trace {
            trace.push_str(&format!("{n},{it},{}\n", svg::fmt_num(*v)));
        }
        tuned.save(&tuned_grid_path(&grid_dir, n))?;
        m.grids.push((n, tuned.grid_hash.clone()));
    }
    write_text(&dir.join("tuning.csv"), &trace)?;
    finish(m, &dir, &["tuning.csv"])
}

fn sample(cfg: &ExperimentConfig, pipeline: Pipeline) -> Result<i32> {
    let target = cfg.target()?;
    let models = Models::load(cfg, &target, &[pipeline])?;
    let mut m = RunManifest::new("sample", cfg)?;
    m.checkpoints = models.hashes();
    let dir = fresh_run_dir(&cfg.output_dir, "sample")?;
    let mut outputs = Vec::new();
    for &nfe in &cfg.nfe {
        let steps = pipeline.steps_for(nfe)?;
        let grid = match pipeline {
            Pipeline::BctmIs => Some(grid_for(cfg, steps)?),
            _ => None,
        };
        if let Some(g) = &grid {
            m.grids.push((steps, g.hash()));
        }
        for &seed in &cfg.seeds {
            let ens = run_pipeline(cfg, &target, &models, pipeline, nfe, seed, cfg.k)?;
            let stem = format!("{}_nfe{nfe}_seed{seed}", pipeline.tag());
            let hash = models.hashes().first().map(|h| h.1.clone());
            ens.export(&dir, &stem, grid.as_ref(), hash.as_deref())?;
            log::info!("{stem}: ESS {:.1}", crate::is_engine::ess(&ens)?);
            outputs.push(format!("{stem}.csv"));
        }
    }
    let refs: Vec<&str> = outputs.iter().map(String::as_str).collect();
    finish(m, &dir, &refs)
}

fn ess_curve(cfg: &ExperimentConfig) -> Result<i32> {
    let target = cfg.target()?;
    let models = Models::load(cfg, &target, &cfg.pipelines)?;
    let mut m = RunManifest::new("ess-curve", cfg)?;
    m.checkpoints = models.hashes();
    let dir = fresh_run_dir(&cfg.output_dir, "ess-curve")?;
    let (_, summary) = run_ess_curve(cfg, &target, &models, &cfg.nfe, &dir)?;
    for s in &summary {
        println!("{} nfe={} ess%={:.2} [{:.2}, {:.2}]", s.pipeline, s.nfe, s.mean, s.q1, s.q3);
    }
    finish(m, &dir, &["ess_rows.csv", "ess_summary.csv", "ess_curve.svg"])
}

fn integral_table(cfg: &ExperimentConfig) -> Result<i32> {
    let target = cfg.target()?;
    let models = Models::load(cfg, &target, &cfg.pipelines)?;
    let mut m = RunManifest::new("integral-table", cfg)?;
    m.checkpoints = models.hashes();
    let dir = fresh_run_dir(&cfg.output_dir, "integral-table")?;
    let (_, summary) = run_integral_table(cfg, &target, &models, &dir)?;
    for s in &summary {
        println!(
            "{} {} nfe={}: {:.5} ± {:.5} (oracle {:.5}, z {:.2})",
            s.pipeline, s.phi, s.nfe, s.mean, s.se, s.oracle_mean, s.z
        );
    }
    finish(m, &dir, &["integral_rows.csv", "integral_summary.csv"])
}

fn alignment(cfg: &ExperimentConfig) -> Result<i32> {
    let target = cfg.target()?;
    let sampler = cfg.sampler(&target)?;
    let mut m = RunManifest::new("alignment-study", cfg)?;
    let dir = fresh_run_dir(&cfg.output_dir, "alignment-study")?;
    let grids = |n: usize| grid_for(cfg, n);
    // Without a trajectory-model checkpoint the analytic probability-flow
    // ODE of a mixture target stands in for the flow map.
    let rows = if cfg.bctm_path().exists() || cfg.models.bctm.is_some() || target.as_gmm().is_none() {
        let (bctm, h) = cfg.load_bctm(&target)?;
        m.checkpoints.push(("bctm".into(), h));
        run_alignment_study(cfg, &sampler, &bctm as &dyn FlowMap, grids, &dir)?
    } else {
        let flow = OdeFlow {
            denoiser: GmmDenoiser {
                target: target.as_gmm().cloned().expect("checked above"),
            },
            substeps: cfg.alignment.substeps,
        };
        m.checkpoints.push(("analytic-ode".into(), String::new()));
        run_alignment_study(cfg, &sampler, &flow, grids, &dir)?
    };
    for r in &rows {
        println!("{} N={} seed={}: marginal W1 {:.4}, joint W1 {:.4}", r.design, r.steps, r.seed, r.total_w1, r.joint_w1);
    }
    finish(m, &dir, &["alignment.csv", "alignment_marginals.csv"])
}

fn verify() -> i32 {
    let started = Instant::now();
    let checks = verify_suite();
    for c in &checks {
        println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    println!("{:.1}s", started.elapsed().as_secs_f64());
    if checks.iter().all(|c| c.passed) {
        0
    } else {
        4
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["cmis", "no-such-command"]), 2);
        assert_eq!(run(["cmis", "ess-curve"]), 2);
    }

    #[test]
    fn missing_config_exits_three() {
        assert_eq!(run(["cmis", "ess-curve", "--config", "/nonexistent/cfg.toml"]), 3);
    }

    #[test]
    fn missing_checkpoint_exits_three() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.toml");
        std::fs::write(&cfg, "[target]\nkind = \"gaussian\"\ndim = 2\n").unwrap();
        let code = run(["cmis", "sample", "--config", cfg.to_str().unwrap(), "--nfe", "4"]);
        assert_eq!(code, 3);
    }
}
