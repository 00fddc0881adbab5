//! Denoisers, trajectory models and their closed-form counterparts.

mod analytic;
mod checkpoint;
mod egnn;
mod embed;
mod mlp;
mod network;

pub use analytic::{GaussianFlow, GmmDenoiser};
pub use checkpoint::{sha256_hex, Checkpoint, ModelRole, CHECKPOINT_VERSION};
pub use egnn::EgnnNet;
pub use embed::{Precond, TimeEmbedding};
pub use mlp::{Activation, MlpNet};
pub use network::{Architecture, Backbone, Denoiser, Network, TrajectoryModel, INFERENCE_CHUNK};

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::targets::ParticleLayout;
use crate::{EPS, T_MAX};

/// Estimate of `E[x_0 | x_t = x]`.
pub trait DenoiserFn: Sync {
    fn dim(&self) -> usize;

    fn layout(&self) -> Option<ParticleLayout> {
        None
    }

    fn denoise(&self, x: &Tensor, t: f64) -> Result<Tensor>;

    /// Denoises row `i` at time `t[i]`.
    fn denoise_rows(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        check_rows(x, t)?;
        let parts = (0..x.rows())
            .map(|i| self.denoise(&x.slice_rows(i, i + 1), t[i]))
            .collect::<Result<Vec<_>>>()?;
        if parts.is_empty() {
            return Ok(x.clone());
        }
        Tensor::concat_rows(&parts)
    }
}

/// Map along probability-flow trajectories from time `t` to time `s`.
pub trait FlowMap: Sync {
    fn dim(&self) -> usize;

    fn layout(&self) -> Option<ParticleLayout> {
        None
    }

    fn traverse(&self, x: &Tensor, t: f64, s: f64) -> Result<Tensor>;

    /// Differentiable in `x`, `t` and `s`; parameters are held fixed.
    fn traverse_var<'t>(&self, tape: &'t Tape, x: Var<'t>, t: Var<'t>, s: Var<'t>) -> Result<Var<'t>>;
}

const TIME_SLACK: f64 = 1e-9;

/// Rejects times outside `[EPS, T_MAX]`.
pub fn check_time(t: f64) -> Result<()> {
    if t.is_finite() && t >= EPS * (1.0 - TIME_SLACK) && t <= T_MAX * (1.0 + TIME_SLACK) {
        Ok(())
    } else {
        Err(Error::Domain(format!("time {t} outside [{EPS}, {T_MAX}]")))
    }
}

pub(crate) fn check_rows(x: &Tensor, t: &[f64]) -> Result<()> {
    if t.len() != x.rows() {
        return Err(Error::Shape(format!("{} times for {} rows", t.len(), x.rows())));
    }
    t.iter().try_for_each(|&v| check_time(v))
}

/// `(D(x, t) - x) / t^2`.
pub fn score_from_denoiser<D: DenoiserFn + ?Sized>(model: &D, x: &Tensor, t: f64) -> Result<Tensor> {
    let d = model.denoise(x, t)?;
    Ok(d.sub(x)?.scale(1.0 / (t * t)))
}

/// Wraps a model and counts evaluated rows, so NFE per sample is
/// `rows() / K`.
pub struct Counted<'a, M: ?Sized> {
    pub inner: &'a M,
    rows: AtomicU64,
    calls: AtomicU64,
}

impl<'a, M: ?Sized> Counted<'a, M> {
    pub fn new(inner: &'a M) -> Self {
        Self {
            inner,
            rows: AtomicU64::new(0),
            calls: AtomicU64::new(0),
        }
    }

    pub fn rows(&self) -> u64 {
        self.rows.load(Ordering::Relaxed)
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    fn record(&self, rows: usize) {
        self.rows.fetch_add(rows as u64, Ordering::Relaxed);
        self.calls.fetch_add(1, Ordering::Relaxed);
    }
}

impl<M: DenoiserFn + ?Sized> DenoiserFn for Counted<'_, M> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn layout(&self) -> Option<ParticleLayout> {
        self.inner.layout()
    }

    fn denoise(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self.record(x.rows());
        self.inner.denoise(x, t)
    }

    fn denoise_rows(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        self.record(x.rows());
        self.inner.denoise_rows(x, t)
    }
}

impl<M: FlowMap + ?Sized> FlowMap for Counted<'_, M> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn layout(&self) -> Option<ParticleLayout> {
        self.inner.layout()
    }

    fn traverse(&self, x: &Tensor, t: f64, s: f64) -> Result<Tensor> {
        self.record(x.rows());
        self.inner.traverse(x, t, s)
    }

    fn traverse_var<'t>(&self, tape: &'t Tape, x: Var<'t>, t: Var<'t>, s: Var<'t>) -> Result<Var<'t>> {
        self.record(x.rows());
        self.inner.traverse_var(tape, x, t, s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RandomStream;
    use crate::targets::GmmTarget;

    #[test]
    fn fresh_denoiser_is_skip_scaled_identity() {
        let arch = Architecture::mlp(3, vec![16, 16], 3, 1);
        let d = Denoiser::new(arch, 1.7, &mut RandomStream::new(0, 0)).unwrap();
        let x = RandomStream::new(1, 0).normal_tensor(7, 3);
        for &t in &[EPS, 0.5, 80.0] {
            let y = d.denoise(&x, t).unwrap();
            let cs = Precond::at(t, 1.7).c_skip;
            assert!(y.max_abs_diff(&x.scale(cs)) < 1e-15);
            assert_eq!(y.shape(), x.shape());
        }
        assert!((d.denoise(&x, EPS).unwrap().max_abs_diff(&x)) < 1e-5);
        assert!(matches!(d.denoise(&x, 100.0), Err(Error::Domain(_))));
        assert!(matches!(d.denoise(&x, 0.001), Err(Error::Domain(_))));
    }

    fn random_trajectory() -> TrajectoryModel {
        let arch = Architecture::mlp(2, vec![16, 16], 2, 2);
        let mut rng = RandomStream::new(5, 0);
        let mut m = TrajectoryModel::new(arch, 1.0, &mut rng).unwrap();
        for p in &mut m.net.params {
            let r = rng.normal_tensor(p.rows(), p.cols()).scale(0.5);
            *p = r.reshape(p.shape().to_vec()).unwrap();
        }
        m
    }

    #[test]
    fn anchoring_identity_is_bit_exact() {
        let m = random_trajectory();
        let x = RandomStream::new(2, 0).normal_tensor(9, 2).scale(5.0);
        for &t in &[EPS, 0.37, 12.0, 80.0] {
            let tape = Tape::new();
            let xv = tape.constant(x.clone());
            let tv = tape.scalar(t);
            let y = m.traverse_var(&tape, xv, tv, tv).unwrap().value();
            assert_eq!(y.data(), x.data());
            assert_eq!(m.traverse(&x, t, t).unwrap().data(), x.data());
        }
    }

    #[test]
    fn traverse_rejects_out_of_range_times() {
        let m = random_trajectory();
        let x = Tensor::zeros(&[1, 2]);
        assert!(m.traverse(&x, 81.0, 1.0).is_err());
        assert!(m.traverse(&x, 1.0, 0.0).is_err());
    }

    #[test]
    fn denoiser_score_identity_holds_for_any_model() {
        let m = random_trajectory();
        let x = RandomStream::new(3, 0).normal_tensor(5, 2);
        let t = 0.9;
        let d = m.denoise(&x, t).unwrap();
        let s = score_from_denoiser(&m, &x, t).unwrap();
        let mut back = x.clone();
        back.axpy(t * t, &s);
        assert!(back.max_abs_diff(&d) < 1e-13);
    }

    #[test]
    fn counted_wrapper_counts_rows() {
        let g = GmmDenoiser {
            target: GmmTarget::gaussian(vec![0.0], 1.0).unwrap(),
        };
        let c = Counted::new(&g);
        c.denoise(&Tensor::zeros(&[10, 1]), 1.0).unwrap();
        c.denoise(&Tensor::zeros(&[10, 1]), 0.5).unwrap();
        assert_eq!((c.rows(), c.calls()), (20, 2));
    }

    #[test]
    fn network_gradients_match_finite_differences() {
        let m = random_trajectory();
        let mut rng = RandomStream::new(8, 0);
        let x = rng.normal_tensor(4, 2);
        let t = Tensor::column(vec![0.01, 0.5, 3.0, 60.0]);
        let s = Tensor::column(vec![0.3, 0.002, 9.0, 1.0]);
        let err = crate::numerics::finite_difference_check_multi(
            |tape, p| {
                let y = m.traverse_with(
                    tape,
                    p,
                    tape.constant(x.clone()),
                    tape.constant(t.clone()),
                    tape.constant(s.clone()),
                );
                y.square().sum()
            },
            &m.net.params,
            100,
            &mut rng,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
