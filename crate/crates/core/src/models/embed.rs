use serde::{Deserialize, Serialize};

use crate::numerics::{Tape, Tensor, Var};

/// EDM preconditioning coefficients at time `t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Precond {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

impl Precond {
    pub fn at(t: f64, sigma_data: f64) -> Self {
        let sd2 = sigma_data * sigma_data;
        let denom = sd2 + t * t;
        Self {
            c_skip: sd2 / denom,
            c_out: t * sigma_data / denom.sqrt(),
            c_in: 1.0 / denom.sqrt(),
            c_noise: 0.25 * t.ln(),
        }
    }
}

/// The same coefficients as tape variables, for a `[r, 1]` column of times.
pub(crate) struct PrecondVar<'t> {
    pub c_skip: Var<'t>,
    pub c_out: Var<'t>,
    pub c_in: Var<'t>,
}

pub(crate) fn precond_var<'t>(t: Var<'t>, sigma_data: f64) -> PrecondVar<'t> {
    let sd2 = sigma_data * sigma_data;
    let denom = t.square() + sd2;
    let root = denom.sqrt();
    PrecondVar {
        c_skip: sd2 * denom.recip(),
        c_out: (t / root) * sigma_data,
        c_in: root.recip(),
    }
}

/// Features `[c_noise, sin(f_k c_noise), cos(f_k c_noise)]` with geometric
/// frequencies `f_k = 2^k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeEmbedding {
    pub n_freq: usize,
}

impl TimeEmbedding {
    pub fn dim(&self) -> usize {
        1 + 2 * self.n_freq
    }

    fn freqs(&self) -> Tensor {
        Tensor::row_vector((0..self.n_freq).map(|k| (1u64 << k) as f64).collect())
    }

    pub(crate) fn embed<'t>(&self, tape: &'t Tape, t: Var<'t>) -> Var<'t> {
        let c = t.ln() * 0.25;
        if self.n_freq == 0 {
            return c;
        }
        let phase = c * tape.constant(self.freqs());
        tape.concat(&[c, phase.sin(), phase.cos()])
            .expect("embedding parts share rows")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coefficient_limits() {
        let p = Precond::at(crate::EPS, 1.0);
        assert!((p.c_skip - 1.0).abs() < 1e-5);
        assert!(p.c_out < 3e-3);
        let p = Precond::at(80.0, 1.0);
        assert!(p.c_skip < 2e-4);
        assert!((p.c_out - 1.0).abs() < 1e-4);
    }

    #[test]
    fn tape_coefficients_match_scalar_ones() {
        let tape = Tape::new();
        let ts = [0.002, 0.3, 1.0, 17.0, 80.0];
        let t = tape.constant(Tensor::column(ts.to_vec()));
        let pv = precond_var(t, 0.7);
        for (i, &ti) in ts.iter().enumerate() {
            let p = Precond::at(ti, 0.7);
            assert!((pv.c_skip.value().data()[i] - p.c_skip).abs() < 1e-15);
            assert!((pv.c_out.value().data()[i] - p.c_out).abs() < 1e-15);
            assert!((pv.c_in.value().data()[i] - p.c_in).abs() < 1e-15);
        }
        let e = TimeEmbedding { n_freq: 3 }.embed(&tape, t);
        assert_eq!(e.shape(), (5, 7));
        assert!((e.value().data()[0] - 0.25 * 0.002f64.ln()).abs() < 1e-15);
    }
}
