use crate::error::{Error, Result};
use crate::models::DenoiserFn;
use crate::numerics::{RandomStream, Tensor};
use crate::targets::ParticleLayout;

/// Standard normal noise, projected onto the zero-CoG subspace for particles.
pub fn noise(rows: usize, cols: usize, layout: Option<ParticleLayout>, rng: &mut RandomStream) -> Tensor {
    match layout {
        Some(l) => l.subspace_noise(rows, rng),
        None => rng.normal_tensor(rows, cols),
    }
}

/// `x + sqrt(t_to^2 - t_from^2) z`.
pub fn forward_noise(
    x: &Tensor,
    t_from: f64,
    t_to: f64,
    layout: Option<ParticleLayout>,
    rng: &mut RandomStream,
) -> Result<Tensor> {
    if !(t_to > t_from) || t_from < 0.0 {
        return Err(Error::Domain(format!("forward_noise needs t_to > t_from >= 0, got {t_from} -> {t_to}")));
    }
    let sd = (t_to * t_to - t_from * t_from).sqrt();
    let mut out = x.clone();
    out.axpy(sd, &noise(x.rows(), x.cols(), layout, rng));
    Ok(out)
}

/// `sigma_{n-1}(eta) = eta sqrt((t_n^2 - t_prev^2) t_prev^2 / t_n^2)`.
pub fn ddim_sigma(t_n: f64, t_prev: f64, eta: f64) -> f64 {
    eta * ((t_n * t_n - t_prev * t_prev) * t_prev * t_prev / (t_n * t_n)).sqrt()
}

/// Mean and standard deviation of the DDIM-style reverse kernel.
pub fn ddim_kernel<D: DenoiserFn + ?Sized>(
    model: &D,
    x: &Tensor,
    t_n: f64,
    t_prev: f64,
    eta: f64,
) -> Result<(Tensor, f64)> {
    if !(t_prev < t_n) || !(0.0..=1.0).contains(&eta) {
        return Err(Error::Domain(format!(
            "ddim step needs t_prev < t_n and eta in [0, 1], got {t_prev}, {t_n}, {eta}"
        )));
    }
    let sigma = ddim_sigma(t_n, t_prev, eta);
    let rem = t_prev * t_prev - sigma * sigma;
    assert!(rem >= 0.0, "sigma^2 exceeds t_prev^2");
    let a = (rem / (t_n * t_n)).sqrt();
    let x0 = model.denoise(x, t_n)?;
    let mut mean = x.scale(a);
    mean.axpy(1.0 - a, &x0);
    Ok((mean, sigma))
}

/// One DDIM-style step from `t_n` to `t_prev`; `eta = 0` adds no noise.
pub fn ddim_step<D: DenoiserFn + ?Sized>(
    model: &D,
    x: &Tensor,
    t_n: f64,
    t_prev: f64,
    eta: f64,
    rng: &mut RandomStream,
) -> Result<Tensor> {
    let (mut mean, sigma) = ddim_kernel(model, x, t_n, t_prev, eta)?;
    if eta > 0.0 {
        mean.axpy(sigma, &noise(x.rows(), x.cols(), model.layout(), rng));
    }
    Ok(mean)
}

/// Explicit Euler step of `dx/dt = -t score(x, t)` from `t` to `u`.
pub fn euler_step<D: DenoiserFn + ?Sized>(model: &D, x: &Tensor, t: f64, u: f64) -> Result<Tensor> {
    let score = crate::models::score_from_denoiser(model, x, t)?;
    let mut out = x.clone();
    out.axpy(-(u - t) * t, &score);
    Ok(out)
}
