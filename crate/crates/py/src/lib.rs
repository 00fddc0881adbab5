//! Python bindings. Samples travel as lists of rows.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use cmis_core::harness::{cli, untuned_params};
use cmis_core::is_engine::{self, TimeGrid};
use cmis_core::models::{Checkpoint, Denoiser, GaussianFlow, TrajectoryModel};
use cmis_core::numerics::{RandomStream, Tensor};
use cmis_core::sampling::{log_schedule, rho_schedule};
use cmis_core::schedule_opt::{build_time_grid, ScheduleParams, TunedGrid};
use cmis_core::targets::{DwTarget, GmmTarget, Target as CoreTarget, TestFunction};
use cmis_core::{Error, EPS, T_MAX};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Config(_) | Error::Shape(_) | Error::Domain(_) | Error::Grid { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(py_err)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.rows_iter().map(<[f64]>::to_vec).collect()
}

/// Unnormalized target density.
#[pyclass(name = "Target", module = "cmis", frozen)]
struct PyTarget(CoreTarget);

#[pymethods]
impl PyTarget {
    /// Forty-component mixture with uniformly drawn means.
    #[staticmethod]
    fn gmm40(dim: usize) -> Self {
        Self(CoreTarget::Gmm(GmmTarget::gmm40(dim)))
    }

    #[staticmethod]
    fn gaussian(mean: Vec<f64>, variance: f64) -> PyResult<Self> {
        Ok(Self(CoreTarget::Gmm(GmmTarget::gaussian(mean, variance).map_err(py_err)?)))
    }

    #[staticmethod]
    fn mixture(weights: Vec<f64>, means: Vec<Vec<f64>>, component_variance: f64) -> PyResult<Self> {
        Ok(Self(CoreTarget::Gmm(
            GmmTarget::new(weights, means, component_variance).map_err(py_err)?,
        )))
    }

    /// Four planar particles under the double-well pair potential.
    #[staticmethod]
    fn double_well() -> Self {
        Self(CoreTarget::DoubleWell(DwTarget::default()))
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn log_density(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        self.0.log_density_rows(&tensor(x)?).map_err(py_err)
    }

    fn sample(&self, n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let x = self.0.sample_exact(n, &mut RandomStream::new(seed, 0)).map_err(py_err)?;
        Ok(rows(&x))
    }
}

/// Interleaved grid of sampling, target and proposal times.
#[pyclass(name = "TimeGrid", module = "cmis", frozen)]
struct PyTimeGrid(TimeGrid);

#[pymethods]
impl PyTimeGrid {
    /// Variance-matched grid from raw (pre-sigmoid) parameters.
    #[staticmethod]
    fn from_raw(raw_mu: Vec<f64>, raw_eta: Vec<f64>) -> PyResult<Self> {
        let p = ScheduleParams {
            raw_mu,
            raw_eta,
            mode: Default::default(),
        };
        Ok(Self(build_time_grid(&p).map_err(py_err)?))
    }

    /// Default untuned grid with `n` steps.
    #[staticmethod]
    fn untuned(n: usize) -> PyResult<Self> {
        Ok(Self(build_time_grid(&untuned_params(n).map_err(py_err)?).map_err(py_err)?))
    }

    /// Grid saved by `cmis tune-grid`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(TunedGrid::load(&path).map_err(py_err)?.grid))
    }

    #[getter]
    fn t(&self) -> Vec<f64> {
        self.0.t.clone()
    }

    #[getter]
    fn tar(&self) -> Vec<f64> {
        self.0.tar.clone()
    }

    #[getter]
    fn prop(&self) -> Vec<f64> {
        self.0.prop.clone()
    }

    #[getter]
    fn steps(&self) -> usize {
        self.0.steps()
    }
}

enum Model {
    Denoiser(Denoiser),
    Trajectory(TrajectoryModel),
    Gaussian(GaussianFlow),
}

/// Trained network or analytic Gaussian flow.
#[pyclass(name = "Model", module = "cmis", frozen)]
struct PyModel(Model);

#[pymethods]
impl PyModel {
    /// Loads a denoiser or trajectory-model checkpoint.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(py_err)?;
        let m = if ck.network.arch.n_times == 2 {
            Model::Trajectory(ck.into_trajectory().map_err(py_err)?)
        } else {
            Model::Denoiser(ck.into_denoiser().map_err(py_err)?)
        };
        Ok(Self(m))
    }

    /// Exact denoiser and flow map of `N(mean, variance I)`.
    #[staticmethod]
    fn gaussian(mean: Vec<f64>, variance: f64) -> PyResult<Self> {
        Ok(Self(Model::Gaussian(GaussianFlow::new(mean, variance).map_err(py_err)?)))
    }

    #[getter]
    fn kind(&self) -> &'static str {
        match self.0 {
            Model::Denoiser(_) => "denoiser",
            Model::Trajectory(_) => "trajectory",
            Model::Gaussian(_) => "gaussian",
        }
    }
}

/// Weighted samples from one importance-sampling run.
#[pyclass(name = "WeightedEnsemble", module = "cmis", frozen)]
struct PyEnsemble(is_engine::WeightedEnsemble);

#[pymethods]
impl PyEnsemble {
    #[getter]
    fn samples(&self) -> Vec<Vec<f64>> {
        rows(&self.0.samples)
    }

    #[getter]
    fn log_weights(&self) -> Vec<f64> {
        self.0.log_weights.clone()
    }

    #[getter]
    fn nfe(&self) -> usize {
        self.0.nfe
    }

    fn ess(&self) -> PyResult<f64> {
        is_engine::ess(&self.0).map_err(py_err)
    }

    /// Self-normalized estimate and standard error of a test function
    /// (`log_l2_norm`, `log_l1_norm` or `cos_l2_norm`).
    fn estimate(&self, phi: &str) -> PyResult<(f64, f64)> {
        let phi = TestFunction::parse(phi).map_err(py_err)?;
        is_engine::snis_estimate(&self.0, phi).map_err(py_err)
    }
}

/// Alternating ODE-SDE proposal with joint-space importance weights.
#[pyfunction]
#[pyo3(signature = (model, target, grid, k, seed=0))]
fn bctm_is(model: &PyModel, target: &PyTarget, grid: &PyTimeGrid, k: usize, seed: u64) -> PyResult<PyEnsemble> {
    let mut rng = RandomStream::new(seed, 0);
    let e = match &model.0 {
        Model::Trajectory(m) => is_engine::bctm_is(m, &target.0, &grid.0, k, &mut rng),
        Model::Gaussian(m) => is_engine::bctm_is(m, &target.0, &grid.0, k, &mut rng),
        Model::Denoiser(_) => Err(Error::Capability("bctm_is needs a trajectory model".into())),
    };
    Ok(PyEnsemble(e.map_err(py_err)?))
}

/// Ancestral sampling with importance weights over the whole chain.
#[pyfunction]
#[pyo3(signature = (model, target, steps, k, eta=1.0, schedule="log", seed=0))]
fn ddpm_is(
    model: &PyModel,
    target: &PyTarget,
    steps: usize,
    k: usize,
    eta: f64,
    schedule: &str,
    seed: u64,
) -> PyResult<PyEnsemble> {
    let sch = match schedule {
        "log" => log_schedule(steps, EPS, T_MAX),
        "rho" => rho_schedule(steps, EPS, T_MAX, 7.0),
        other => Err(Error::Config(format!("unknown schedule {other:?}"))),
    }
    .map_err(py_err)?;
    let mut rng = RandomStream::new(seed, 0);
    let e = match &model.0 {
        Model::Denoiser(m) => is_engine::baseline_ddpm_is(m, &target.0, &sch, eta, k, &mut rng),
        Model::Trajectory(m) => is_engine::baseline_ddpm_is(m, &target.0, &sch, eta, k, &mut rng),
        Model::Gaussian(m) => is_engine::baseline_ddpm_is(m, &target.0, &sch, eta, k, &mut rng),
    };
    Ok(PyEnsemble(e.map_err(py_err)?))
}

/// Runs the command-line front end; returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    cli::run(std::iter::once("cmis".to_string()).chain(args))
}

#[pymodule]
fn cmis(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTarget>()?;
    m.add_class::<PyTimeGrid>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyEnsemble>()?;
    m.add_function(wrap_pyfunction!(bctm_is, m)?)?;
    m.add_function(wrap_pyfunction!(ddpm_is, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("EPS", EPS)?;
    m.add("T_MAX", T_MAX)?;
    Ok(())
}
