use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::svg::{fmt_num, scatter_grid, LineChart, ScatterPanel, Series};
use super::{result_row, run_pipeline, unweighted, write_rows, write_text, ExperimentConfig, Models, Pipeline, ResultRow};
use crate::error::{Error, Result};
use crate::is_engine::{proposal_rollout, TimeGrid};
use crate::models::FlowMap;
use crate::numerics::{mean_and_se, quantile, wasserstein_1d, RandomStream, Tensor};
use crate::sampling::noise;
use crate::targets::{eval_test_function, mcmc_reference, Target, TargetSampler, TestFunction};

/// Mean and quartiles of ESS percent over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct EssSummary {
    pub pipeline: String,
    pub nfe: usize,
    pub mean: f64,
    pub q1: f64,
    pub q3: f64,
    pub seeds: usize,
}

fn write_ess_summary(path: &Path, rows: &[EssSummary]) -> Result<()> {
    let mut s = String::from("pipeline,nfe,mean,q1,q3,seeds\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.pipeline,
            r.nfe,
            fmt_num(r.mean),
            fmt_num(r.q1),
            fmt_num(r.q3),
            r.seeds
        );
    }
    write_text(path, &s)
}

/// ESS versus NFE for every configured pipeline and seed.
///
/// Writes `ess_rows.csv`, `ess_summary.csv` and `ess_curve.svg` to `dir`.
/// Odd budgets are skipped for the trajectory-model pipeline.
pub fn run_ess_curve(
    cfg: &ExperimentConfig,
    target: &Target,
    models: &Models,
    nfe_list: &[usize],
    dir: &Path,
) -> Result<(Vec<ResultRow>, Vec<EssSummary>)> {
    let phi = *cfg.phi.first().ok_or_else(|| Error::Config("no test function configured".into()))?;
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &p in &cfg.pipelines {
        for &nfe in nfe_list {
            if p.steps_for(nfe).is_err() {
                log::warn!("{}: skipping NFE {nfe}", p.tag());
                continue;
            }
            let mut ess = Vec::new();
            for &seed in &cfg.seeds {
                let start = Instant::now();
                let ens = run_pipeline(cfg, target, models, p, nfe, seed, cfg.k)?;
                let row = result_row(p.tag(), &ens, phi, seed, start)?;
                log::info!("{} nfe {nfe} seed {seed}: ess {:.2}%", p.tag(), row.ess_percent);
                ess.push(row.ess_percent);
                rows.push(row);
            }
            summary.push(EssSummary {
                pipeline: p.tag().into(),
                nfe,
                mean: ess.iter().sum::<f64>() / ess.len() as f64,
                q1: quantile(&ess, 0.25),
                q3: quantile(&ess, 0.75),
                seeds: ess.len(),
            });
        }
    }
    write_rows(&dir.join("ess_rows.csv"), &rows)?;
    write_ess_summary(&dir.join("ess_summary.csv"), &summary)?;
    let series = cfg
        .pipelines
        .iter()
        .filter_map(|p| {
            let s: Vec<&EssSummary> = summary.iter().filter(|r| r.pipeline == p.tag()).collect();
            (!s.is_empty()).then(|| Series {
                name: p.tag().into(),
                x: s.iter().map(|r| r.nfe as f64).collect(),
                y: s.iter().map(|r| r.mean).collect(),
                band: Some((s.iter().map(|r| r.q1).collect(), s.iter().map(|r| r.q3).collect())),
            })
        })
        .collect();
    let chart = LineChart {
        title: format!("ESS vs NFE (K = {}, {} seeds)", cfg.k, cfg.seeds.len()),
        x_label: "NFE".into(),
        y_label: "ESS (%)".into(),
        log_x: true,
        series,
    };
    write_text(&dir.join("ess_curve.svg"), &chart.render())?;
    Ok((rows, summary))
}

/// Across-seed summary of one table row group, compared with the oracle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegralSummary {
    pub pipeline: String,
    pub nfe: usize,
    pub phi: String,
    pub mean: f64,
    /// Standard deviation over seeds.
    pub std: f64,
    /// Standard error of `mean`.
    pub se: f64,
    pub oracle_mean: f64,
    pub oracle_se: f64,
    /// `(mean - oracle_mean) / sqrt(se^2 + oracle_se^2)`.
    pub z: f64,
}

const ORACLE_CHUNK: usize = 1 << 20;

/// Mean and standard error of `phi` over `n` oracle draws.
fn oracle_estimate(cfg: &ExperimentConfig, target: &Target, phi: TestFunction, n: usize, seed: u64) -> Result<(f64, f64)> {
    let stream = 0x6f7261636c65;
    let values: Vec<f64> = match target {
        Target::DoubleWell(dw) => {
            let rng = RandomStream::new(cfg.oracle.seed ^ seed.wrapping_mul(0x9e3779b97f4a7c15), stream);
            let out = mcmc_reference(dw, n, &cfg.oracle.mcmc, &rng)?;
            eval_test_function(phi, &out.samples)?
        }
        _ => {
            let mut rng = RandomStream::new(cfg.oracle.seed, stream).substream(seed);
            let mut v = Vec::with_capacity(n);
            let mut left = n;
            while left > 0 {
                let m = left.min(ORACLE_CHUNK);
                v.extend(eval_test_function(phi, &target.sample_exact(m, &mut rng)?)?);
                left -= m;
            }
            v
        }
    };
    let (m, se) = mean_and_se(&values);
    Ok((m, se))
}

/// Table of oracle, unweighted and importance-weighted estimates.
///
/// Rows: `oracle`, and for each configured pipeline `<model>_mc` (the same
/// samples unweighted) and `<model>_is`. Writes `integral_rows.csv` and
/// `integral_summary.csv`.
pub fn run_integral_table(
    cfg: &ExperimentConfig,
    target: &Target,
    models: &Models,
    dir: &Path,
) -> Result<(Vec<ResultRow>, Vec<IntegralSummary>)> {
    let mut rows = Vec::new();
    let per_seed = (cfg.oracle.samples / cfg.seeds.len()).max(2);
    for &phi in &cfg.phi {
        for &seed in &cfg.seeds {
            let start = Instant::now();
            let (m, se) = oracle_estimate(cfg, target, phi, per_seed, seed)?;
            rows.push(ResultRow {
                pipeline: "oracle".into(),
                nfe: 0,
                phi: phi.tag().into(),
                estimate: m,
                std_error: se,
                ess_percent: 100.0,
                seed,
                wall_clock_s: start.elapsed().as_secs_f64(),
            });
        }
    }
    for &p in &cfg.pipelines {
        let (nfe, is_tag, mc_tag) = match p {
            Pipeline::DdpmIs => (cfg.table.ddpm_nfe, Some("ddpm_is"), "ddpm_mc"),
            Pipeline::BctmIs => (cfg.table.bctm_nfe, Some("bctm_is"), "bctm_mc"),
            Pipeline::McOnly => (cfg.table.ddpm_nfe, None, "mc_only"),
        };
        for &seed in &cfg.seeds {
            let start = Instant::now();
            let ens = run_pipeline(cfg, target, models, p, nfe, seed, cfg.k)?;
            let flat = unweighted(&ens);
            for &phi in &cfg.phi {
                if let Some(tag) = is_tag {
                    rows.push(result_row(tag, &ens, phi, seed, start)?);
                }
                rows.push(result_row(mc_tag, &flat, phi, seed, start)?);
            }
        }
    }
    let summary = summarize_integrals(&rows);
    write_rows(&dir.join("integral_rows.csv"), &rows)?;
    write_rows(&dir.join("integral_summary.csv"), &summary)?;
    Ok((rows, summary))
}

/// Groups rows by (pipeline, phi) and compares each group with the oracle.
pub fn summarize_integrals(rows: &[ResultRow]) -> Vec<IntegralSummary> {
    let mut keys: Vec<(String, usize, String)> = Vec::new();
    for r in rows {
        let k = (r.pipeline.clone(), r.nfe, r.phi.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let oracle = |phi: &str| {
        let o: Vec<&ResultRow> = rows.iter().filter(|r| r.pipeline == "oracle" && r.phi == phi).collect();
        if o.is_empty() {
            return (f64::NAN, f64::NAN);
        }
        let n = o.len() as f64;
        let m = o.iter().map(|r| r.estimate).sum::<f64>() / n;
        let se = o.iter().map(|r| r.std_error * r.std_error).sum::<f64>().sqrt() / n;
        (m, se)
    };
    keys.into_iter()
        .map(|(pipeline, nfe, phi)| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.pipeline == pipeline && r.phi == phi && r.nfe == nfe)
                .map(|r| r.estimate)
                .collect();
            let (om, ose) = oracle(&phi);
            let (mean, se) = if pipeline == "oracle" { (om, ose) } else { mean_and_se(&v) };
            let std = se * (v.len() as f64).sqrt();
            let z = if pipeline == "oracle" { 0.0 } else { (mean - om) / (se * se + ose * ose).sqrt() };
            IntegralSummary {
                pipeline,
                nfe,
                phi,
                mean,
                std,
                se,
                oracle_mean: om,
                oracle_se: ose,
                z,
            }
        })
        .collect()
}

/// Summed marginal distances of one design, seed and grid size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRow {
    pub design: String,
    pub steps: usize,
    pub seed: u64,
    pub total_w1: f64,
    /// Sliced W1 between the joints of the scored marginals.
    pub joint_w1: f64,
}

/// Forward rollout of the target joint: `x_0` from the target, then a
/// flow-map hop to `tar[n-1]` and Gaussian noise up to `t_n`.
fn target_rollout<M: FlowMap + ?Sized>(
    flow: &M,
    grid: &TimeGrid,
    x0: Tensor,
    rng: &mut RandomStream,
) -> Result<Vec<Tensor>> {
    let (k, d, layout) = (x0.rows(), x0.cols(), flow.layout());
    let mut out = vec![x0];
    for n in 1..=grid.steps() {
        let mut x = flow.traverse(&out[n - 1], grid.t[n - 1], grid.tar[n - 1])?;
        x.axpy(grid.target_variance(n).sqrt(), &noise(k, d, layout, rng));
        out.push(x);
    }
    Ok(out)
}

/// `sum over coordinates of W1` for each of the first `n` marginals.
pub fn alignment_scores(a: &[Tensor], b: &[Tensor], n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            (0..a[i].cols())
                .map(|c| {
                    let col = |t: &Tensor| t.rows_iter().map(|r| r[c]).collect::<Vec<f64>>();
                    wasserstein_1d(&col(&a[i]), &col(&b[i]))
                })
                .sum()
        })
        .collect()
}

/// Mean 1-D W1 over `dirs` random projections of the stacked marginals
/// `x_{t_0} .. x_{t_{n-1}}`. Each block is divided by its coordinate-pooled
/// standard deviation under `b` so that the noisiest times do not dominate.
pub fn sliced_joint_w1(a: &[Tensor], b: &[Tensor], n: usize, dirs: usize, rng: &mut RandomStream) -> f64 {
    let d = b[0].cols();
    let scale: Vec<f64> = (0..n)
        .map(|i| {
            let v = b[i].data();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
            1.0 / var.sqrt().max(1e-12)
        })
        .collect();
    let mut total = 0.0;
    for _ in 0..dirs {
        let mut u: Vec<f64> = (0..n * d).map(|_| rng.normal()).collect();
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (j, x) in u.iter_mut().enumerate() {
            *x *= scale[j / d] / norm;
        }
        let project = |xs: &[Tensor]| -> Vec<f64> {
            (0..xs[0].rows())
                .map(|r| (0..n).map(|i| xs[i].row(r).iter().zip(&u[i * d..]).map(|(x, w)| x * w).sum::<f64>()).sum())
                .collect()
        };
        total += wasserstein_1d(&project(a), &project(b));
    }
    total / dirs as f64
}

/// Grid with the same times and proposal but a pure-noise target.
fn sde_only(grid: &TimeGrid) -> Result<TimeGrid> {
    TimeGrid::new(grid.t.clone(), grid.t[..grid.steps()].to_vec(), grid.prop.clone())
}

/// Compares proposal and target joints under the pure-noise and the
/// alternating ODE-SDE target designs.
///
/// Both designs share the proposal draws and the target's `x_0` and noise.
/// Marginals `x_{t_0} .. x_{t_{N-1}}` are scored. Writes
/// `alignment.csv`, `alignment_marginals.csv`, a scatter dump and one SVG per
/// grid size.
pub fn run_alignment_study<M: FlowMap + ?Sized>(
    cfg: &ExperimentConfig,
    sampler: &TargetSampler,
    flow: &M,
    grid_for: impl Fn(usize) -> Result<TimeGrid>,
    dir: &Path,
) -> Result<Vec<AlignmentRow>> {
    let a = &cfg.alignment;
    let mut rows = Vec::new();
    let mut marginals = String::from("design,steps,seed,time_index,time,w1\n");
    for &steps in &a.steps {
        let alt = grid_for(steps)?;
        let designs = [("sde_only", sde_only(&alt)?), ("alternating", alt)];
        let mut panels = Vec::new();
        let mut dump = String::from("design,source,time_index");
        for c in 0..flow.dim() {
            let _ = write!(dump, ",x{c}");
        }
        dump.push('\n');
        for (si, &seed) in cfg.seeds.iter().enumerate() {
            let root = RandomStream::new(seed, 0x616c69676e ^ steps as u64);
            let prop = proposal_rollout(flow, &designs[1].1, a.samples, &mut root.substream(0))?;
            let ptraj = prop.trajectory.expect("recorded");
            let x0 = sampler.draw(a.samples, &mut root.substream(1))?;
            for (name, grid) in &designs {
                let ttraj = target_rollout(flow, grid, x0.clone(), &mut root.substream(2))?;
                let w = alignment_scores(&ptraj, &ttraj, steps);
                for (i, v) in w.iter().enumerate() {
                    let _ = writeln!(marginals, "{name},{steps},{seed},{i},{},{}", fmt_num(grid.t[i]), fmt_num(*v));
                }
                let total: f64 = w.iter().sum();
                let joint = sliced_joint_w1(&ptraj, &ttraj, steps, 64, &mut root.substream(3));
                log::info!("alignment {name} N={steps} seed {seed}: {total:.4}, joint {joint:.4}");
                rows.push(AlignmentRow {
                    design: (*name).into(),
                    steps,
                    seed,
                    total_w1: total,
                    joint_w1: joint,
                });
                if si == 0 {
                    for i in 0..steps {
                        let pts = |t: &Tensor| -> Vec<(f64, f64)> {
                            t.rows_iter()
                                .take(a.dump)
                                .enumerate()
                                .map(|(j, r)| (r[0], r.get(1).copied().unwrap_or(j as f64 / a.dump as f64)))
                                .collect()
                        };
                        panels.push(ScatterPanel {
                            title: format!("{name}: x at t_{i} = {:.3}", grid.t[i]),
                            sets: vec![("proposal".into(), pts(&ptraj[i])), ("target".into(), pts(&ttraj[i]))],
                        });
                        for r in ttraj[i].rows_iter().take(a.dump) {
                            let _ = writeln!(dump, "{name},target,{i},{}", join(r));
                        }
                    }
                }
            }
            if si == 0 {
                for i in 0..steps {
                    for r in ptraj[i].rows_iter().take(a.dump) {
                        let _ = writeln!(dump, "shared,proposal,{i},{}", join(r));
                    }
                }
            }
        }
        write_text(&dir.join(format!("alignment_dump_n{steps}.csv")), &dump)?;
        let svg = scatter_grid(&format!("Proposal vs target marginals, N = {steps}"), &panels, steps);
        write_text(&dir.join(format!("alignment_n{steps}.svg")), &svg)?;
    }
    write_rows(&dir.join("alignment.csv"), &rows)?;
    write_text(&dir.join("alignment_marginals.csv"), &marginals)?;
    Ok(rows)
}

fn join(r: &[f64]) -> String {
    r.iter().map(|v| fmt_num(*v)).collect::<Vec<_>>().join(",")
}
