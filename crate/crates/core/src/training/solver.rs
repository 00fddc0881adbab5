use crate::error::{Error, Result};
use crate::models::{check_time, DenoiserFn, FlowMap};
use crate::numerics::{Tape, Tensor, Var};
use crate::targets::ParticleLayout;

/// One Heun step of `dx/dt = (x - D(x, t)) / t` from `t` to `u`.
pub fn heun_step<D: DenoiserFn + ?Sized>(model: &D, x: &Tensor, t: f64, u: f64) -> Result<Tensor> {
    check_time(t)?;
    check_time(u)?;
    if u == t {
        return Ok(x.clone());
    }
    let n = x.rows();
    heun_step_rows(model, x, &vec![t; n], &vec![u; n])
}

fn slope(x: &Tensor, d: &Tensor, t: &[f64]) -> Tensor {
    let mut out = x.clone();
    for (i, &ti) in t.iter().enumerate() {
        for (o, dv) in out.row_mut(i).iter_mut().zip(d.row(i)) {
            *o = (*o - dv) / ti;
        }
    }
    out
}

/// Heun step with per-row start and end times.
pub fn heun_step_rows<D: DenoiserFn + ?Sized>(model: &D, x: &Tensor, t: &[f64], u: &[f64]) -> Result<Tensor> {
    if t.len() != x.rows() || u.len() != x.rows() {
        return Err(Error::Shape(format!("{} rows with {}/{} times", x.rows(), t.len(), u.len())));
    }
    let d_t = slope(x, &model.denoise_rows(x, t)?, t);
    let mut pred = x.clone();
    for i in 0..x.rows() {
        let h = u[i] - t[i];
        for (p, s) in pred.row_mut(i).iter_mut().zip(d_t.row(i)) {
            *p += h * s;
        }
    }
    let d_u = slope(&pred, &model.denoise_rows(&pred, u)?, u);
    let mut out = x.clone();
    for i in 0..x.rows() {
        let h = 0.5 * (u[i] - t[i]);
        for ((o, a), b) in out.row_mut(i).iter_mut().zip(d_t.row(i)).zip(d_u.row(i)) {
            *o += h * (a + b);
        }
    }
    Ok(out)
}

/// `substeps` Heun steps per row, geometrically spaced between `t` and `u`.
pub fn heun_integrate_rows<D: DenoiserFn + ?Sized>(
    model: &D,
    x: &Tensor,
    t: &[f64],
    u: &[f64],
    substeps: usize,
) -> Result<Tensor> {
    if substeps == 0 {
        return Err(Error::Config("need at least one Heun substep".into()));
    }
    let mut x = x.clone();
    let mut from = t.to_vec();
    for j in 1..=substeps {
        let frac = j as f64 / substeps as f64;
        let to: Vec<f64> = t
            .iter()
            .zip(u)
            .map(|(&a, &b)| if j == substeps { b } else { a * (b / a).powf(frac) })
            .collect();
        x = heun_step_rows(model, &x, &from, &to)?;
        from = to;
    }
    Ok(x)
}

/// Integrates a whole batch along `times` (any direction).
pub fn heun_integrate<D: DenoiserFn + ?Sized>(model: &D, x: &Tensor, times: &[f64]) -> Result<Tensor> {
    let mut x = x.clone();
    for w in times.windows(2) {
        x = heun_step(model, &x, w[0], w[1])?;
    }
    Ok(x)
}

/// Flow map obtained by solving the probability-flow ODE of a denoiser with
/// geometric Heun substeps. Not differentiable.
#[derive(Clone, Debug)]
pub struct OdeFlow<D> {
    pub denoiser: D,
    pub substeps: usize,
}

impl<D: DenoiserFn> FlowMap for OdeFlow<D> {
    fn dim(&self) -> usize {
        self.denoiser.dim()
    }

    fn layout(&self) -> Option<ParticleLayout> {
        self.denoiser.layout()
    }

    fn traverse(&self, x: &Tensor, t: f64, s: f64) -> Result<Tensor> {
        check_time(t)?;
        check_time(s)?;
        if s == t {
            return Ok(x.clone());
        }
        let n = x.rows();
        heun_integrate_rows(&self.denoiser, x, &vec![t; n], &vec![s; n], self.substeps)
    }

    fn traverse_var<'t>(&self, _: &'t Tape, _: Var<'t>, _: Var<'t>, _: Var<'t>) -> Result<Var<'t>> {
        Err(Error::Capability("an ODE-solver flow map is not differentiable".into()))
    }
}
