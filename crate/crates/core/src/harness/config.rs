use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Architecture, Checkpoint, Denoiser, TrajectoryModel};
use crate::numerics::RandomStream;
use crate::sampling::{log_schedule, rho_schedule, Schedule};
use crate::schedule_opt::TuneConfig;
use crate::targets::{mcmc_reference, McmcConfig, Target, TargetSampler, TargetSpec, TestFunction};
use crate::training::{DistillConfig, DsmConfig};
use crate::{EPS, T_MAX};

/// Which sampler produces an ensemble.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    /// Ancestral sampling with the trajectory-space importance weights.
    DdpmIs,
    /// Alternating ODE-SDE proposal and target with a trajectory model.
    BctmIs,
    /// Unweighted ancestral samples.
    McOnly,
}

impl Pipeline {
    pub fn tag(&self) -> &'static str {
        match self {
            Pipeline::DdpmIs => "ddpm_is",
            Pipeline::BctmIs => "bctm_is",
            Pipeline::McOnly => "mc_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [Pipeline::DdpmIs, Pipeline::BctmIs, Pipeline::McOnly]
            .into_iter()
            .find(|p| p.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown pipeline `{s}`")))
    }

    /// Steps of the underlying grid for an NFE budget.
    pub fn steps_for(&self, nfe: usize) -> Result<usize> {
        match self {
            Pipeline::BctmIs if nfe < 2 || nfe % 2 == 1 => {
                Err(Error::Config(format!("bctm_is needs an even NFE >= 2, got {nfe}")))
            }
            Pipeline::BctmIs => Ok(nfe / 2),
            _ if nfe == 0 => Err(Error::Config("NFE must be positive".into())),
            _ => Ok(nfe),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    Log,
    Rho { rho: f64 },
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec::Rho { rho: 7.0 }
    }
}

impl ScheduleSpec {
    pub fn build(&self, steps: usize) -> Result<Schedule> {
        match self {
            ScheduleSpec::Log => log_schedule(steps, EPS, T_MAX),
            ScheduleSpec::Rho { rho } => rho_schedule(steps, EPS, T_MAX, *rho),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdpmSpec {
    pub eta: f64,
    pub schedule: ScheduleSpec,
}

impl Default for DdpmSpec {
    fn default() -> Self {
        Self {
            eta: 1.0,
            schedule: ScheduleSpec::default(),
        }
    }
}

/// Grids for the trajectory-model pipeline.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GridSpec {
    /// Untuned variance-matched grid on the `rho = 7` times with every
    /// target time 90% of the way to the next time.
    #[default]
    Untuned,
    /// `grid_n{N}.json` files written by `tune-grid`, by default under
    /// `<output_dir>/grids`.
    Tuned {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dir: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    pub hidden: Vec<usize>,
    pub n_freq: usize,
    pub egnn_hidden: usize,
    pub egnn_layers: usize,
    /// Defaults to the root mean per-coordinate variance of the target.
    pub sigma_data: Option<f64>,
    pub init_seed: u64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128, 128],
            n_freq: 16,
            egnn_hidden: 64,
            egnn_layers: 4,
            sigma_data: None,
            init_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneSpec {
    #[serde(flatten)]
    pub config: TuneConfig,
    /// Grid sizes N to tune; defaults to every even NFE of the sweep.
    pub grid_steps: Vec<usize>,
}

impl Default for TuneSpec {
    fn default() -> Self {
        Self {
            config: TuneConfig::default(),
            grid_steps: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSpec {
    /// Exact-sampler draws, split evenly across seeds.
    pub samples: usize,
    /// Reservoir size for targets without an exact sampler.
    pub bank: usize,
    pub mcmc: McmcConfig,
    pub seed: u64,
}

impl Default for OracleSpec {
    fn default() -> Self {
        Self {
            samples: 10_000_000,
            bank: 100_000,
            mcmc: McmcConfig::default(),
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TableSpec {
    pub ddpm_nfe: usize,
    pub bctm_nfe: usize,
}

impl Default for TableSpec {
    fn default() -> Self {
        Self {
            ddpm_nfe: 100,
            bctm_nfe: 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentSpec {
    pub steps: Vec<usize>,
    pub samples: usize,
    /// Heun substeps per hop when no trajectory checkpoint is given.
    pub substeps: usize,
    /// Rows per (design, source) written to the scatter dump.
    pub dump: usize,
}

impl Default for AlignmentSpec {
    fn default() -> Self {
        Self {
            steps: vec![3],
            samples: 20_000,
            substeps: 32,
            dump: 2_000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelRefs {
    pub denoiser: Option<PathBuf>,
    pub bctm: Option<PathBuf>,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_k() -> usize {
    10_000
}

fn default_pipelines() -> Vec<Pipeline> {
    vec![Pipeline::DdpmIs, Pipeline::BctmIs]
}

/// Default NFE sweep.
pub const NFE_SWEEP: [usize; 9] = [2, 4, 6, 8, 12, 16, 24, 50, 100];

fn default_nfe() -> Vec<usize> {
    NFE_SWEEP.to_vec()
}

fn default_phi() -> Vec<TestFunction> {
    vec![TestFunction::LogL2Norm]
}

/// One experiment, read from a TOML document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub target: TargetSpec,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_pipelines")]
    pub pipelines: Vec<Pipeline>,
    #[serde(default = "default_nfe")]
    pub nfe: Vec<usize>,
    #[serde(default = "default_phi")]
    pub phi: Vec<TestFunction>,
    #[serde(default)]
    pub models: ModelRefs,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub ddpm: DdpmSpec,
    #[serde(default)]
    pub network: NetworkSpec,
    #[serde(default)]
    pub dsm: DsmConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub tune: TuneSpec,
    #[serde(default)]
    pub oracle: OracleSpec,
    #[serde(default)]
    pub table: TableSpec,
    #[serde(default)]
    pub alignment: AlignmentSpec,
}

impl ExperimentConfig {
    /// Minimal config for `target`; every other field takes its default.
    pub fn for_target(target: TargetSpec) -> Self {
        Self {
            target,
            output_dir: default_output(),
            seeds: default_seeds(),
            k: default_k(),
            pipelines: default_pipelines(),
            nfe: default_nfe(),
            phi: default_phi(),
            models: ModelRefs::default(),
            grid: GridSpec::default(),
            ddpm: DdpmSpec::default(),
            network: NetworkSpec::default(),
            dsm: DsmConfig::default(),
            distill: DistillConfig::default(),
            tune: TuneSpec::default(),
            oracle: OracleSpec::default(),
            table: TableSpec::default(),
            alignment: AlignmentSpec::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Reads a config file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut c = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        c.resolve(base);
        Ok(c)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let Some(p) = self.models.denoiser.as_mut() {
            fix(p);
        }
        if let Some(p) = self.models.bctm.as_mut() {
            fix(p);
        }
        if let GridSpec::Tuned { dir: Some(dir) } = &mut self.grid {
            fix(dir);
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.target.build()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        if !(self.ddpm.eta > 0.0 && self.ddpm.eta <= 1.0) {
            return Err(Error::Config(format!("ddpm eta {} outside (0, 1]", self.ddpm.eta)));
        }
        if self.nfe.contains(&0) {
            return Err(Error::Config("NFE values must be positive".into()));
        }
        Ok(())
    }

    pub fn target(&self) -> Result<Target> {
        self.target.build()
    }

    pub fn denoiser_path(&self) -> PathBuf {
        self.models.denoiser.clone().unwrap_or_else(|| self.output_dir.join("denoiser.json"))
    }

    pub fn bctm_path(&self) -> PathBuf {
        self.models.bctm.clone().unwrap_or_else(|| self.output_dir.join("bctm.json"))
    }

    pub fn grid_dir(&self) -> PathBuf {
        match &self.grid {
            GridSpec::Tuned { dir: Some(dir) } => dir.clone(),
            _ => self.output_dir.join("grids"),
        }
    }

    /// Grid sizes for `tune-grid`.
    pub fn tune_steps(&self) -> Vec<usize> {
        if !self.tune.grid_steps.is_empty() {
            return self.tune.grid_steps.clone();
        }
        let mut n: Vec<usize> = self.nfe.iter().filter(|&&v| v >= 2 && v % 2 == 0).map(|v| v / 2).collect();
        if !n.contains(&(self.table.bctm_nfe / 2)) && self.table.bctm_nfe >= 2 {
            n.push(self.table.bctm_nfe / 2);
        }
        n.sort_unstable();
        n.dedup();
        n
    }

    pub fn sigma_data(&self, target: &Target) -> Result<f64> {
        if let Some(s) = self.network.sigma_data {
            return Ok(s);
        }
        Ok(match target {
            Target::Gmm(g) => {
                let (_, var) = g.moments();
                (var.iter().sum::<f64>() / var.len() as f64).sqrt()
            }
            // Unit-scale particle systems.
            Target::DoubleWell(_) => 1.0,
        })
    }

    /// Fresh, untrained denoiser for the target.
    pub fn new_denoiser(&self, target: &Target) -> Result<Denoiser> {
        let n = &self.network;
        let arch = match target.layout() {
            Some(l) => Architecture::egnn(l, n.egnn_hidden, n.egnn_layers, n.n_freq, 1),
            None => Architecture::mlp(target.dim(), n.hidden.clone(), n.n_freq, 1),
        };
        Denoiser::new(arch, self.sigma_data(target)?, &mut RandomStream::new(n.init_seed, 0x696e6974))
    }

    pub fn load_denoiser(&self, target: &Target) -> Result<(Denoiser, String)> {
        let p = self.denoiser_path();
        let ck = load_checkpoint(&p, target)?;
        let h = ck.params_hash();
        Ok((ck.into_denoiser()?, h))
    }

    pub fn load_bctm(&self, target: &Target) -> Result<(TrajectoryModel, String)> {
        let p = self.bctm_path();
        let ck = load_checkpoint(&p, target)?;
        let h = ck.params_hash();
        Ok((ck.into_trajectory()?, h))
    }

    /// Exact sampler when available, otherwise an MCMC reservoir.
    pub fn sampler(&self, target: &Target) -> Result<TargetSampler> {
        match target {
            Target::DoubleWell(dw) => {
                let rng = RandomStream::new(self.oracle.seed, 0x62616e6b);
                let out = mcmc_reference(dw, self.oracle.bank, &self.oracle.mcmc, &rng)?;
                if let Some(w) = &out.warning {
                    log::warn!("{w}");
                }
                Ok(TargetSampler::Bank(out.samples))
            }
            t => Ok(TargetSampler::Exact(t.clone())),
        }
    }
}

fn load_checkpoint(path: &Path, target: &Target) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Config(format!("missing checkpoint {}", path.display())));
    }
    let ck = Checkpoint::load(path)?;
    if ck.network.arch.dim != target.dim() {
        return Err(Error::Config(format!(
            "{}: model dimension {} does not match target dimension {}",
            path.display(),
            ck.network.arch.dim,
            target.dim()
        )));
    }
    Ok(ck)
}
