//! Experiment recipes, result tables, plots and the command-line front end.

pub mod checks;
pub mod cli;
mod config;
mod experiments;
pub mod svg;

pub use config::{
    AlignmentSpec, DdpmSpec, ExperimentConfig, GridSpec, ModelRefs, NetworkSpec, OracleSpec, Pipeline, ScheduleSpec,
    TableSpec, TuneSpec, NFE_SWEEP,
};
pub use experiments::{
    alignment_scores, run_alignment_study, run_ess_curve, run_integral_table, AlignmentRow, EssSummary,
    IntegralSummary,
};

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::is_engine::{baseline_ddpm_is, bctm_is, ess, snis_estimate, TimeGrid, WeightedEnsemble};
use crate::models::{Denoiser, TrajectoryModel};
use crate::numerics::RandomStream;
use crate::sampling::{ancestral_sample, rho_schedule};
use crate::schedule_opt::{build_time_grid, ScheduleParams, TunedGrid};
use crate::targets::{Target, TestFunction};
use crate::{EPS, T_MAX};

/// One (pipeline, NFE, test function, seed) measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub pipeline: String,
    pub nfe: usize,
    pub phi: String,
    pub estimate: f64,
    pub std_error: f64,
    /// `100 * ESS / K`, in `(0, 100]`.
    pub ess_percent: f64,
    pub seed: u64,
    pub wall_clock_s: f64,
}

/// Loaded networks plus their parameter hashes for manifests.
#[derive(Default)]
pub struct Models {
    pub denoiser: Option<(Denoiser, String)>,
    pub bctm: Option<(TrajectoryModel, String)>,
}

impl Models {
    /// Loads the checkpoints `pipelines` need.
    pub fn load(cfg: &ExperimentConfig, target: &Target, pipelines: &[Pipeline]) -> Result<Self> {
        let mut m = Models::default();
        if pipelines.iter().any(|p| matches!(p, Pipeline::DdpmIs | Pipeline::McOnly)) {
            m.denoiser = Some(cfg.load_denoiser(target)?);
        }
        if pipelines.contains(&Pipeline::BctmIs) {
            m.bctm = Some(cfg.load_bctm(target)?);
        }
        Ok(m)
    }

    fn denoiser(&self) -> Result<&Denoiser> {
        self.denoiser.as_ref().map(|d| &d.0).ok_or_else(|| Error::Config("no denoiser loaded".into()))
    }

    fn bctm(&self) -> Result<&TrajectoryModel> {
        self.bctm.as_ref().map(|d| &d.0).ok_or_else(|| Error::Config("no trajectory model loaded".into()))
    }

    pub fn hashes(&self) -> Vec<(String, String)> {
        let mut v = Vec::new();
        if let Some((_, h)) = &self.denoiser {
            v.push(("denoiser".into(), h.clone()));
        }
        if let Some((_, h)) = &self.bctm {
            v.push(("bctm".into(), h.clone()));
        }
        v
    }
}

/// Grid for an N-step trajectory-model run.
pub fn grid_for(cfg: &ExperimentConfig, n: usize) -> Result<TimeGrid> {
    match &cfg.grid {
        GridSpec::Untuned => build_time_grid(&untuned_params(n)?),
        GridSpec::Tuned { .. } => {
            let p = tuned_grid_path(&cfg.grid_dir(), n);
            if !p.exists() {
                return Err(Error::Config(format!("missing tuned grid {}", p.display())));
            }
            Ok(TunedGrid::load(&p)?.grid)
        }
    }
}

/// Untuned starting point: rho = 7 times with every target time 90% of the
/// way to the next time. Halfway placement clamps most proposal times to
/// the minimum on geometric grids.
pub fn untuned_params(n: usize) -> Result<ScheduleParams> {
    ScheduleParams::from_times(rho_schedule(n, EPS, T_MAX, 7.0)?.times(), 0.9)
}

pub fn tuned_grid_path(dir: &Path, n: usize) -> PathBuf {
    dir.join(format!("grid_n{n}.json"))
}

/// Stream id isolating one (pipeline, NFE) job from every other.
pub fn stream_id(pipeline: Pipeline, nfe: usize) -> u64 {
    let p = match pipeline {
        Pipeline::DdpmIs => 1,
        Pipeline::BctmIs => 2,
        Pipeline::McOnly => 3,
    };
    (p << 32) | nfe as u64
}

/// Runs one pipeline at one NFE budget and seed.
pub fn run_pipeline(
    cfg: &ExperimentConfig,
    target: &Target,
    models: &Models,
    pipeline: Pipeline,
    nfe: usize,
    seed: u64,
    k: usize,
) -> Result<WeightedEnsemble> {
    let steps = pipeline.steps_for(nfe)?;
    let mut rng = RandomStream::new(seed, stream_id(pipeline, nfe));
    let mut ens = match pipeline {
        Pipeline::DdpmIs => {
            let sch = cfg.ddpm.schedule.build(steps)?;
            baseline_ddpm_is(models.denoiser()?, target, &sch, cfg.ddpm.eta, k, &mut rng)?
        }
        Pipeline::McOnly => {
            let sch = cfg.ddpm.schedule.build(steps)?;
            let b = ancestral_sample(models.denoiser()?, &sch, cfg.ddpm.eta, k, &mut rng, false)?;
            WeightedEnsemble {
                samples: b.samples,
                log_weights: vec![0.0; k],
                trajectory: None,
                nfe: b.nfe,
                seed,
                grid_hash: String::new(),
                pipeline: pipeline.tag().into(),
            }
        }
        Pipeline::BctmIs => bctm_is(models.bctm()?, target, &grid_for(cfg, steps)?, k, &mut rng)?,
    };
    ens.seed = seed;
    Ok(ens)
}

/// Measures `ens` on `phi`, with ESS as a percentage of K.
pub fn result_row(pipeline: &str, ens: &WeightedEnsemble, phi: TestFunction, seed: u64, started: Instant) -> Result<ResultRow> {
    let (estimate, std_error) = snis_estimate(ens, phi)?;
    Ok(ResultRow {
        pipeline: pipeline.into(),
        nfe: ens.nfe,
        phi: phi.tag().into(),
        estimate,
        std_error,
        ess_percent: 100.0 * ess(ens)? / ens.len() as f64,
        seed,
        wall_clock_s: started.elapsed().as_secs_f64(),
    })
}

/// Unweighted view of an ensemble.
pub fn unweighted(ens: &WeightedEnsemble) -> WeightedEnsemble {
    WeightedEnsemble {
        samples: ens.samples.clone(),
        log_weights: vec![0.0; ens.len()],
        trajectory: None,
        nfe: ens.nfe,
        seed: ens.seed,
        grid_hash: ens.grid_hash.clone(),
        pipeline: ens.pipeline.clone(),
    }
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|x| x.map_err(Error::from)).collect()
}

/// Run record written beside every output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub config: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub checkpoints: Vec<(String, String)>,
    pub grids: Vec<(usize, String)>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &ExperimentConfig) -> Result<Self> {
        let config = cfg.to_toml()?;
        Ok(Self {
            command: command.into(),
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: crate::models::sha256_hex(config.as_bytes())[..16].into(),
            config,
            seeds: cfg.seeds.clone(),
            checkpoints: Vec::new(),
            grids: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let p = dir.join("manifest.json");
        std::fs::write(&p, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&p, e))
    }
}

/// Creates `<root>/<name>-<n>` with the first unused `n`, so earlier runs
/// are never overwritten.
pub fn fresh_run_dir(root: &Path, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for n in 0.. {
        let d = root.join(format!("{name}-{n:03}"));
        match std::fs::create_dir(&d) {
            Ok(()) => return Ok(d),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&d, e)),
        }
    }
    unreachable!()
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
