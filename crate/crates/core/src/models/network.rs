use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::egnn::EgnnNet;
use super::embed::{precond_var, TimeEmbedding};
use super::mlp::{Activation, MlpNet};
use super::{check_rows, check_time, DenoiserFn, FlowMap};
use crate::error::{Error, Result};
use crate::numerics::{RandomStream, Tape, Tensor, Var};
use crate::targets::ParticleLayout;

/// Rows per inference chunk.
pub const INFERENCE_CHUNK: usize = 2048;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backbone {
    Mlp(MlpNet),
    Egnn(EgnnNet),
}

/// Everything needed to rebuild a network from its parameter arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub dim: usize,
    pub layout: Option<ParticleLayout>,
    pub embedding: TimeEmbedding,
    /// 1 for a denoiser `F(x, t)`, 2 for a trajectory network `F(x, t, s)`.
    pub n_times: usize,
    pub backbone: Backbone,
}

impl Architecture {
    pub fn mlp(dim: usize, hidden: Vec<usize>, n_freq: usize, n_times: usize) -> Self {
        let embedding = TimeEmbedding { n_freq };
        let cond_dim = n_times * embedding.dim();
        Self {
            dim,
            layout: None,
            embedding,
            n_times,
            backbone: Backbone::Mlp(MlpNet {
                in_dim: dim,
                cond_dim,
                hidden,
                out_dim: dim,
                activation: Activation::Silu,
            }),
        }
    }

    pub fn egnn(layout: ParticleLayout, hidden: usize, layers: usize, n_freq: usize, n_times: usize) -> Self {
        let embedding = TimeEmbedding { n_freq };
        let cond_dim = n_times * embedding.dim();
        Self {
            dim: layout.ambient_dim(),
            layout: Some(layout),
            embedding,
            n_times,
            backbone: Backbone::Egnn(EgnnNet {
                layout,
                cond_dim,
                hidden,
                layers,
            }),
        }
    }

    pub fn param_shapes(&self) -> Vec<[usize; 2]> {
        match &self.backbone {
            Backbone::Mlp(m) => m.param_shapes(),
            Backbone::Egnn(e) => e.param_shapes(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|[r, c]| r * c).sum()
    }

    pub fn init(&self, rng: &mut RandomStream) -> Vec<Tensor> {
        match &self.backbone {
            Backbone::Mlp(m) => m.init(rng),
            Backbone::Egnn(e) => e.init(rng, true),
        }
    }

    fn centering(&self) -> Option<Tensor> {
        let l = self.layout?;
        let d = l.ambient_dim();
        let mut p = Tensor::zeros(&[d, d]);
        for a in 0..d {
            for b in 0..d {
                if a % l.space_dim == b % l.space_dim {
                    p.data_mut()[a * d + b] =
                        if a == b { 1.0 } else { 0.0 } - 1.0 / l.n_particles as f64;
                }
            }
        }
        Some(p)
    }
}

/// Parameters plus architecture and data scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub arch: Architecture,
    pub sigma_data: f64,
    pub params: Vec<Tensor>,
}

impl Network {
    pub fn new(arch: Architecture, sigma_data: f64, rng: &mut RandomStream) -> Result<Self> {
        if !(sigma_data > 0.0) {
            return Err(Error::Config(format!("sigma_data {sigma_data}")));
        }
        let params = arch.init(rng);
        Ok(Self {
            arch,
            sigma_data,
            params,
        })
    }

    pub fn from_parts(arch: Architecture, sigma_data: f64, params: Vec<Tensor>) -> Result<Self> {
        let shapes = arch.param_shapes();
        if shapes.len() != params.len()
            || shapes
                .iter()
                .zip(&params)
                .any(|(s, p)| p.shape() != s.as_slice())
        {
            return Err(Error::Shape("parameters do not match the architecture".into()));
        }
        Ok(Self {
            arch,
            sigma_data,
            params,
        })
    }

    pub fn dim(&self) -> usize {
        self.arch.dim
    }

    pub fn constants<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.iter().map(|p| tape.constant(p.clone())).collect()
    }

    pub fn variables<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.iter().map(|p| tape.var(p.clone())).collect()
    }

    fn project<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        match self.arch.centering() {
            Some(p) => x.matmul(tape.constant(p)),
            None => x,
        }
    }

    /// `c_skip(t) x + c_out(t) F(c_in(t) x, emb(t), emb(s)...)`.
    ///
    /// `times` holds one `[B, 1]` or `[1, 1]` variable per conditioning time;
    /// the first one drives the preconditioning.
    pub fn precond_forward<'t>(
        &self,
        tape: &'t Tape,
        params: &[Var<'t>],
        x: Var<'t>,
        times: &[Var<'t>],
    ) -> Var<'t> {
        debug_assert_eq!(times.len(), self.arch.n_times);
        let x = self.project(tape, x);
        let pc = precond_var(times[0], self.sigma_data);
        let embs: Vec<Var> = times
            .iter()
            .map(|&t| self.arch.embedding.embed(tape, t))
            .collect();
        let cond = if embs.len() == 1 {
            embs[0]
        } else {
            tape.concat(&embs).expect("time columns share rows")
        };
        let xin = x * pc.c_in;
        let f = match &self.arch.backbone {
            Backbone::Mlp(m) => m.forward(tape, params, xin, cond),
            Backbone::Egnn(e) => e.forward(tape, params, xin, cond),
        };
        x * pc.c_skip + f * pc.c_out
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(Error::Shape(format!(
                "network expects {} columns, got {}",
                self.dim(),
                x.cols()
            )));
        }
        Ok(())
    }

    /// Chunked, parallel inference of `f(tape, params, x_chunk)`.
    pub(crate) fn infer<F>(&self, x: &Tensor, f: F) -> Result<Tensor>
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>], Var<'t>) -> Var<'t> + Sync,
    {
        self.check_input(x)?;
        let rows = x.rows();
        let starts: Vec<usize> = (0..rows).step_by(INFERENCE_CHUNK).collect();
        let parts: Vec<Tensor> = starts
            .par_iter()
            .map(|&a| {
                let b = (a + INFERENCE_CHUNK).min(rows);
                let tape = Tape::new();
                let params = self.constants(&tape);
                let xv = tape.constant(x.slice_rows(a, b));
                f(&tape, &params, xv).value()
            })
            .collect();
        if parts.is_empty() {
            return Ok(Tensor::zeros(&[0, self.dim()]));
        }
        Tensor::concat_rows(&parts)
    }

    /// Like [`Network::infer`] with per-row time columns handed to `f`.
    pub(crate) fn infer_timed<F>(&self, x: &Tensor, times: &[&[f64]], f: F) -> Result<Tensor>
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>], Var<'t>, &[Var<'t>]) -> Var<'t> + Sync,
    {
        self.check_input(x)?;
        for t in times {
            check_rows(x, t)?;
        }
        let rows = x.rows();
        let starts: Vec<usize> = (0..rows).step_by(INFERENCE_CHUNK).collect();
        let parts: Vec<Tensor> = starts
            .par_iter()
            .map(|&a| {
                let b = (a + INFERENCE_CHUNK).min(rows);
                let tape = Tape::new();
                let params = self.constants(&tape);
                let xv = tape.constant(x.slice_rows(a, b));
                let tv: Vec<Var> = times.iter().map(|t| tape.constant(Tensor::column(t[a..b].to_vec()))).collect();
                f(&tape, &params, xv, &tv).value()
            })
            .collect();
        if parts.is_empty() {
            return Ok(Tensor::zeros(&[0, self.dim()]));
        }
        Tensor::concat_rows(&parts)
    }
}

/// EDM-preconditioned denoiser `D(x, t)` with an MLP or EGNN backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Denoiser {
    pub net: Network,
}

impl Denoiser {
    pub fn new(arch: Architecture, sigma_data: f64, rng: &mut RandomStream) -> Result<Self> {
        if arch.n_times != 1 {
            return Err(Error::Config("a denoiser takes one time input".into()));
        }
        Ok(Self {
            net: Network::new(arch, sigma_data, rng)?,
        })
    }

    pub fn denoise_var<'t>(&self, tape: &'t Tape, params: &[Var<'t>], x: Var<'t>, t: Var<'t>) -> Var<'t> {
        self.net.precond_forward(tape, params, x, &[t])
    }
}

impl DenoiserFn for Denoiser {
    fn dim(&self) -> usize {
        self.net.dim()
    }

    fn layout(&self) -> Option<ParticleLayout> {
        self.net.arch.layout
    }

    fn denoise(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        check_time(t)?;
        self.net.infer(x, |tape, p, xv| {
            let tv = tape.scalar(t);
            self.denoise_var(tape, p, xv, tv)
        })
    }

    fn denoise_rows(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        self.net.infer_timed(x, &[t], |tape, p, xv, tv| self.denoise_var(tape, p, xv, tv[0]))
    }
}

/// Consistency trajectory model
/// `G(x, t, s) = (s/t) x + (1 - s/t) g(x, t, s)`.
///
/// `G(x, t, t) = x` holds exactly whatever the parameters, and `g(x, t, t)`
/// doubles as a denoiser.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryModel {
    pub net: Network,
}

impl TrajectoryModel {
    pub fn new(arch: Architecture, sigma_data: f64, rng: &mut RandomStream) -> Result<Self> {
        if arch.n_times != 2 {
            return Err(Error::Config("a trajectory model takes two time inputs".into()));
        }
        Ok(Self {
            net: Network::new(arch, sigma_data, rng)?,
        })
    }

    pub fn g_var<'t>(&self, tape: &'t Tape, params: &[Var<'t>], x: Var<'t>, t: Var<'t>, s: Var<'t>) -> Var<'t> {
        self.net.precond_forward(tape, params, x, &[t, s])
    }

    pub fn traverse_with<'t>(
        &self,
        tape: &'t Tape,
        params: &[Var<'t>],
        x: Var<'t>,
        t: Var<'t>,
        s: Var<'t>,
    ) -> Var<'t> {
        let g = self.g_var(tape, params, x, t, s);
        let ratio = s / t;
        x * ratio + g * (-ratio + 1.0)
    }

    /// Student initialized from a denoiser: the second time embedding enters
    /// through zero weights, so `g(x, t, s) = D(x, t)` and each hop starts
    /// as a DDIM step.
    pub fn warm_start(d: &Denoiser) -> Result<Self> {
        let mut arch = d.net.arch.clone();
        arch.n_times = 2;
        let cond = 2 * arch.embedding.dim();
        match &mut arch.backbone {
            Backbone::Mlp(m) => m.cond_dim = cond,
            Backbone::Egnn(e) => e.cond_dim = cond,
        }
        let params = arch
            .param_shapes()
            .iter()
            .zip(&d.net.params)
            .map(|(&[r, c], p)| {
                let mut data = p.data().to_vec();
                data.resize(r * c, 0.0);
                Tensor::matrix(r, c, data)
            })
            .collect();
        Ok(Self {
            net: Network::from_parts(arch, d.net.sigma_data, params)?,
        })
    }

    /// Moves row `i` from `t[i]` to `s[i]`.
    pub fn traverse_rows(&self, x: &Tensor, t: &[f64], s: &[f64]) -> Result<Tensor> {
        self.net.infer_timed(x, &[t, s], |tape, p, xv, tv| self.traverse_with(tape, p, xv, tv[0], tv[1]))
    }
}

impl DenoiserFn for TrajectoryModel {
    fn dim(&self) -> usize {
        self.net.dim()
    }

    fn layout(&self) -> Option<ParticleLayout> {
        self.net.arch.layout
    }

    fn denoise(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        check_time(t)?;
        self.net.infer(x, |tape, p, xv| {
            let tv = tape.scalar(t);
            self.g_var(tape, p, xv, tv, tv)
        })
    }

    fn denoise_rows(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        self.net.infer_timed(x, &[t], |tape, p, xv, tv| self.g_var(tape, p, xv, tv[0], tv[0]))
    }
}

impl FlowMap for TrajectoryModel {
    fn dim(&self) -> usize {
        self.net.dim()
    }

    fn layout(&self) -> Option<ParticleLayout> {
        self.net.arch.layout
    }

    fn traverse(&self, x: &Tensor, t: f64, s: f64) -> Result<Tensor> {
        check_time(t)?;
        check_time(s)?;
        if s == t {
            return Ok(x.clone());
        }
        self.net.infer(x, |tape, p, xv| {
            let (tv, sv) = (tape.scalar(t), tape.scalar(s));
            self.traverse_with(tape, p, xv, tv, sv)
        })
    }

    fn traverse_var<'t>(&self, tape: &'t Tape, x: Var<'t>, t: Var<'t>, s: Var<'t>) -> Result<Var<'t>> {
        let params = self.net.constants(tape);
        Ok(self.traverse_with(tape, &params, x, t, s))
    }
}
