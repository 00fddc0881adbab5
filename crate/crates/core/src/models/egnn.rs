use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::numerics::{RandomStream, Tape, Tensor, Var};
use crate::targets::ParticleLayout;

/// E(n)-equivariant message passing network over a fully connected particle
/// graph.
///
/// Node features start from a projection of the conditioning (time)
/// embedding. Messages see both endpoint features, the squared distance and
/// the embedding. Coordinates move along `(x_i - x_j) / (|x_i - x_j| + 1)`
/// weighted by a scalar of the message. The output is the total coordinate
/// displacement projected onto the zero-CoG subspace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgnnNet {
    pub layout: ParticleLayout,
    pub cond_dim: usize,
    pub hidden: usize,
    pub layers: usize,
}

const PER_LAYER: usize = 11;

impl EgnnNet {
    fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.layout.n_particles;
        (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .collect()
    }

    pub fn param_shapes(&self) -> Vec<[usize; 2]> {
        let (h, e) = (self.hidden, self.cond_dim);
        let mut s = vec![[e, h], [1, h]];
        for _ in 0..self.layers {
            s.extend([
                [2 * h + 1 + e, h],
                [1, h],
                [h, h],
                [1, h],
                [h, h],
                [1, h],
                [h, 1],
                [2 * h, h],
                [1, h],
                [h, h],
                [1, h],
            ]);
        }
        s
    }

    /// Random weights; with `zero_output` the coordinate heads start at zero
    /// so the network output is identically zero.
    pub fn init(&self, rng: &mut RandomStream, zero_output: bool) -> Vec<Tensor> {
        self.param_shapes()
            .iter()
            .enumerate()
            .map(|(i, &[r, c])| {
                let coord_head = i >= 2 && (i - 2) % PER_LAYER == 6;
                if r == 1 || (zero_output && coord_head) {
                    Tensor::zeros(&[r, c])
                } else {
                    let gain = if coord_head { 0.1 } else { 1.0 };
                    rng.normal_tensor(r, c).scale(gain / (r as f64).sqrt())
                }
            })
            .collect()
    }

    fn cols_of(&self, parts: &[usize], width: usize) -> Rc<[usize]> {
        parts
            .iter()
            .flat_map(|&p| (p * width..(p + 1) * width).collect::<Vec<_>>())
            .collect()
    }

    fn aggregation(&self, width: usize) -> Tensor {
        let edges = self.edges();
        let n = self.layout.n_particles;
        let mut a = Tensor::zeros(&[edges.len() * width, n * width]);
        let cols = n * width;
        let scale = 1.0 / (n - 1) as f64;
        for (e, &(i, _)) in edges.iter().enumerate() {
            for q in 0..width {
                a.data_mut()[(e * width + q) * cols + i * width + q] = scale;
            }
        }
        a
    }

    fn centering(&self) -> Tensor {
        let (n, k) = (self.layout.n_particles, self.layout.space_dim);
        let d = n * k;
        let mut p = Tensor::zeros(&[d, d]);
        for a in 0..d {
            for b in 0..d {
                if a % k == b % k {
                    p.data_mut()[a * d + b] = if a == b { 1.0 } else { 0.0 } - 1.0 / n as f64;
                }
            }
        }
        p
    }

    /// `x` is `[B, n*k]`, `cond` is `[B, e]` or `[1, e]`.
    pub fn forward<'t>(&self, tape: &'t Tape, params: &[Var<'t>], x: Var<'t>, cond: Var<'t>) -> Var<'t> {
        let b = x.rows();
        let (n, k, h) = (self.layout.n_particles, self.layout.space_dim, self.hidden);
        let edges = self.edges();
        let ne = edges.len();
        let (src, dst): (Vec<usize>, Vec<usize>) = edges.iter().copied().unzip();
        let hi = self.cols_of(&src, h);
        let hj = self.cols_of(&dst, h);
        let xi = self.cols_of(&src, k);
        let xj = self.cols_of(&dst, k);
        let cond = if cond.rows() == b {
            cond
        } else {
            cond + tape.constant(Tensor::zeros(&[b, 1]))
        };
        let e = self.cond_dim;
        let rep: Rc<[usize]> = (0..ne).flat_map(|_| 0..e).collect();
        let cond_e = cond.gather_cols(rep).reshape(b * ne, e);
        let agg_h = tape.constant(self.aggregation(h));
        let agg_x = tape.constant(self.aggregation(k));

        let node0 = (cond.matmul(params[0]) + params[1]).silu();
        let rep_n: Rc<[usize]> = (0..n).flat_map(|_| 0..h).collect();
        let mut feat = node0.gather_cols(rep_n);
        let mut pos = x;
        for l in 0..self.layers {
            let p = &params[2 + l * PER_LAYER..2 + (l + 1) * PER_LAYER];
            let diff = (pos.gather_cols(xi.clone()) - pos.gather_cols(xj.clone())).reshape(b * ne, k);
            let d2 = diff.square().sum_cols();
            let fi = feat.gather_cols(hi.clone()).reshape(b * ne, h);
            let fj = feat.gather_cols(hj.clone()).reshape(b * ne, h);
            let inp = tape.concat(&[fi, fj, d2, cond_e]).expect("edge rows agree");
            let m = (inp.matmul(p[0]) + p[1]).silu();
            let m = (m.matmul(p[2]) + p[3]).silu();
            let w = (m.matmul(p[4]) + p[5]).silu().matmul(p[6]);
            let dist = (d2 + 1e-8).sqrt() + 1.0;
            let step = (diff * (w / dist)).reshape(b, ne * k).matmul(agg_x);
            pos = pos + step;
            let magg = m.reshape(b, ne * h).matmul(agg_h).reshape(b * n, h);
            let f = feat.reshape(b * n, h);
            let upd = tape.concat(&[f, magg]).expect("node rows agree");
            let upd = ((upd.matmul(p[7]) + p[8]).silu().matmul(p[9]) + p[10]).reshape(b * n, h);
            feat = (f + upd).reshape(b, n * h);
        }
        (pos - x).matmul(tape.constant(self.centering()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net() -> EgnnNet {
        EgnnNet {
            layout: ParticleLayout {
                n_particles: 4,
                space_dim: 2,
            },
            cond_dim: 3,
            hidden: 8,
            layers: 2,
        }
    }

    fn run(net: &EgnnNet, params: &[Tensor], x: &Tensor) -> Tensor {
        let tape = Tape::new();
        let pv: Vec<Var> = params.iter().map(|t| tape.constant(t.clone())).collect();
        let c = tape.constant(Tensor::row_vector(vec![0.3, -0.2, 0.5]));
        net.forward(&tape, &pv, tape.constant(x.clone()), c).value()
    }

    #[test]
    fn zero_output_init_is_zero() {
        let n = net();
        let p = n.init(&mut RandomStream::new(0, 0), true);
        let x = RandomStream::new(1, 0).normal_tensor(3, 8);
        assert!(run(&n, &p, &x).data().iter().all(|&v| v == 0.0));
        assert_eq!(p.len(), n.param_shapes().len());
    }

    #[test]
    fn rotation_and_permutation_equivariance() {
        let n = net();
        let p = n.init(&mut RandomStream::new(0, 0), false);
        let mut rng = RandomStream::new(2, 0);
        let mut x = rng.normal_tensor(5, 8);
        n.layout.project_rows(&mut x);
        let y = run(&n, &p, &x);
        assert!(y.sq_norm() > 1e-6);
        assert!(n.layout.max_abs_cog(&y) < 1e-12);
        let (s, c) = 0.7f64.sin_cos();
        let rot = |t: &Tensor| {
            t.map(|v| v).data().chunks(2).flat_map(|q| [c * q[0] - s * q[1], s * q[0] + c * q[1]]).collect::<Vec<_>>()
        };
        let xr = Tensor::matrix(5, 8, rot(&x));
        let yr = run(&n, &p, &xr);
        assert!(Tensor::matrix(5, 8, rot(&y)).max_abs_diff(&yr) < 1e-10);
        let perm = [2usize, 0, 3, 1];
        let permute = |t: &Tensor| {
            let mut out = Vec::new();
            for r in t.rows_iter() {
                for &i in &perm {
                    out.extend_from_slice(&r[2 * i..2 * i + 2]);
                }
            }
            Tensor::matrix(5, 8, out)
        };
        let yp = run(&n, &p, &permute(&x));
        assert!(permute(&y).max_abs_diff(&yp) < 1e-10);
    }
}
