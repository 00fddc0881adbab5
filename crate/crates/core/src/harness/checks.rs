//! Fast invariant checks behind the `verify` subcommand.

use crate::error::{Error, Result};
use crate::is_engine::{bctm_is, ess, proposal_rollout, TimeGrid};
use crate::models::{Architecture, Denoiser, DenoiserFn, GaussianFlow, TrajectoryModel};
use crate::numerics::{RandomStream, Tensor};
use crate::sampling::{ddim_step, log_schedule};
use crate::schedule_opt::{build_time_grid, ProposalMode, ScheduleParams};
use crate::targets::{DwTarget, GmmTarget, ParticleLayout, Target};
use crate::{EPS, T_MAX};

/// Outcome of one check.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Grid under which the zero-mean Gaussian `N(0, v I)` is matched exactly.
pub fn gaussian_matched_grid(n: usize, v: f64) -> Result<TimeGrid> {
    let mut t = log_schedule(n, EPS, T_MAX)?.times().to_vec();
    t[0] = (2.0 * EPS).min(0.5 * (EPS + t[1]));
    TimeGrid::gaussian_matched(t, &vec![0.5; n], v)
}

/// Log-weight variance and ESS fraction of the analytic Gaussian pipeline.
pub fn gaussian_exactness(n: usize, k: usize, seed: u64) -> Result<(f64, f64)> {
    let v = 0.25;
    let flow = GaussianFlow::new(vec![0.0; 2], v)?;
    let target = Target::Gmm(GmmTarget::gaussian(vec![0.0; 2], v)?);
    let e = bctm_is(&flow, &target, &gaussian_matched_grid(n, v)?, k, &mut RandomStream::new(seed, n as u64))?;
    let m = e.log_weights.iter().sum::<f64>() / k as f64;
    let var = e.log_weights.iter().map(|w| (w - m).powi(2)).sum::<f64>() / k as f64;
    Ok((var, ess(&e)? / k as f64))
}

/// Random raw parameters: returns (valid grids, grid errors). Any other
/// outcome is an error.
pub fn grid_fuzz(count: usize, seed: u64) -> Result<(usize, usize)> {
    let mut rng = RandomStream::new(seed, 0x66757a7a);
    let (mut ok, mut rejected) = (0, 0);
    for _ in 0..count {
        let n = 1 + rng.below(12);
        let mut draw = |n: usize| (0..n).map(|_| 6.0 * rng.normal()).collect::<Vec<f64>>();
        let p = ScheduleParams {
            raw_mu: draw(n),
            raw_eta: draw(n),
            mode: ProposalMode::VarianceMatched,
        };
        match build_time_grid(&p) {
            Ok(g) => {
                g.validate()?;
                ok += 1;
            }
            Err(Error::Grid { .. }) => rejected += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((ok, rejected))
}

fn rotate_rows(x: &Tensor, angle: f64, shift: [f64; 2], perm: &[usize]) -> Tensor {
    let (s, c) = angle.sin_cos();
    let mut out = Vec::with_capacity(x.len());
    for r in x.rows_iter() {
        for &i in perm {
            let (a, b) = (r[2 * i], r[2 * i + 1]);
            out.push(c * a - s * b + shift[0]);
            out.push(s * a + c * b + shift[1]);
        }
    }
    Tensor::matrix(x.rows(), x.cols(), out)
}

/// Largest deviation from E(2) and permutation equivariance of a randomly
/// initialized planar EGNN denoiser over `trials` random transformations.
///
/// Translations act on the input only: the network works in the
/// zero-CoG subspace, so the output is compared with the rotated and
/// permuted output of the untranslated input.
pub fn egnn_equivariance(trials: usize, seed: u64) -> Result<f64> {
    let layout = ParticleLayout {
        n_particles: 4,
        space_dim: 2,
    };
    let arch = Architecture::egnn(layout, 16, 2, 4, 1);
    let mut rng = RandomStream::new(seed, 0x65717569);
    let mut d = Denoiser::new(arch, 1.0, &mut rng)?;
    // Nonzero output layer so that equivariance is not trivially satisfied.
    for p in d.net.params.iter_mut() {
        let fresh = rng.normal_tensor(p.rows(), p.cols()).scale(0.3);
        if p.data().iter().all(|&v| v == 0.0) {
            *p = fresh;
        }
    }
    let mut x = rng.normal_tensor(8, 8);
    layout.project_rows(&mut x);
    let t = 0.7;
    let y = d.denoise(&x, t)?;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let angle = 2.0 * std::f64::consts::PI * rng.uniform();
        let shift = [3.0 * rng.normal(), 3.0 * rng.normal()];
        let mut perm: Vec<usize> = (0..4).collect();
        for i in (1..4).rev() {
            perm.swap(i, rng.below(i + 1));
        }
        let yt = d.denoise(&rotate_rows(&x, angle, shift, &perm), t)?;
        let expect = rotate_rows(&y, angle, [0.0, 0.0], &perm);
        worst = worst.max(expect.max_abs_diff(&yt));
    }
    Ok(worst)
}

/// Largest centre-of-gravity coordinate of every state produced by ancestral
/// steps of an EGNN denoiser and by the alternating proposal of an EGNN
/// trajectory model, on the four-particle double-well layout.
pub fn dw_kernel_cog(seed: u64) -> Result<f64> {
    let dw = DwTarget::default();
    let layout = dw.layout();
    let arch = Architecture::egnn(layout, 16, 2, 4, 1);
    let mut rng = RandomStream::new(seed, 0x636f67);
    let d = Denoiser::new(arch, 1.0, &mut rng)?;
    let mut x = layout.subspace_noise(64, &mut rng).scale(T_MAX);
    let times = log_schedule(6, EPS, T_MAX)?.times().to_vec();
    let mut worst: f64 = 0.0;
    for w in times.windows(2).rev() {
        x = ddim_step(&d, &x, w[1], w[0], 1.0, &mut rng)?;
        worst = worst.max(layout.max_abs_cog(&x));
    }
    let m = TrajectoryModel::new(Architecture::egnn(layout, 16, 2, 4, 2), 1.0, &mut rng)?;
    let grid = build_time_grid(&ScheduleParams::from_times(&times, 0.9)?)?;
    let ens = proposal_rollout(&m, &grid, 64, &mut rng)?;
    for x in ens.trajectory.iter().flatten().chain(std::iter::once(&ens.samples)) {
        worst = worst.max(layout.max_abs_cog(x));
    }
    Ok(worst)
}

/// Gaussian exactness, grid fuzz and equivariance.
pub fn verify_suite() -> Vec<Check> {
    let mut out = Vec::new();
    let mut push = |name: &str, r: Result<(bool, String)>| {
        let (passed, detail) = r.unwrap_or_else(|e| (false, e.to_string()));
        out.push(Check {
            name: name.into(),
            passed,
            detail,
        });
    };
    for n in [1, 3, 6] {
        push(
            &format!("gaussian exactness N={n}"),
            gaussian_exactness(n, 4000, 0).map(|(var, frac)| {
                (var < 1e-8 && frac > 0.999, format!("log-weight variance {var:.2e}, ESS/K {frac:.6}"))
            }),
        );
    }
    push(
        "grid fuzz",
        grid_fuzz(10_000, 0).map(|(ok, rej)| (ok > 0, format!("{ok} valid, {rej} rejected with grid errors"))),
    );
    push(
        "egnn equivariance",
        egnn_equivariance(100, 0).map(|e| (e < 1e-5, format!("max deviation {e:.2e}"))),
    );
    push(
        "zero-CoG kernels",
        dw_kernel_cog(0).map(|c| (c < 1e-12, format!("max |CoG| {c:.2e}"))),
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verify_suite_passes() {
        for c in verify_suite() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
