use serde::{Deserialize, Serialize};

use crate::numerics::{RandomStream, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Tanh,
}

impl Activation {
    fn apply<'t>(self, v: Var<'t>) -> Var<'t> {
        match self {
            Activation::Silu => v.silu(),
            Activation::Tanh => v.tanh(),
        }
    }
}

/// Fully connected network on `[x, cond]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpNet {
    pub in_dim: usize,
    pub cond_dim: usize,
    pub hidden: Vec<usize>,
    pub out_dim: usize,
    pub activation: Activation,
}

impl MlpNet {
    fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.in_dim + self.cond_dim];
        s.extend(&self.hidden);
        s.push(self.out_dim);
        s
    }

    /// `[W_0, b_0, W_1, b_1, ...]` shapes.
    pub fn param_shapes(&self) -> Vec<[usize; 2]> {
        self.sizes()
            .windows(2)
            .flat_map(|w| [[w[0], w[1]], [1, w[1]]])
            .collect()
    }

    /// LeCun-normal weights, zero biases, zero output layer.
    pub fn init(&self, rng: &mut RandomStream) -> Vec<Tensor> {
        let shapes = self.param_shapes();
        let last = shapes.len() - 2;
        shapes
            .iter()
            .enumerate()
            .map(|(i, &[r, c])| {
                if r == 1 || i >= last {
                    Tensor::zeros(&[r, c])
                } else {
                    rng.normal_tensor(r, c).scale(1.0 / (r as f64).sqrt())
                }
            })
            .collect()
    }

    pub fn forward<'t>(&self, tape: &'t Tape, params: &[Var<'t>], x: Var<'t>, cond: Var<'t>) -> Var<'t> {
        let mut h = if self.cond_dim == 0 {
            x
        } else {
            tape.concat(&[x, cond]).expect("conditioning rows broadcast")
        };
        let n = params.len() / 2;
        for (l, wb) in params.chunks(2).enumerate() {
            h = h.matmul(wb[0]) + wb[1];
            if l + 1 < n {
                h = self.activation.apply(h);
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_zero_output_init() {
        let net = MlpNet {
            in_dim: 2,
            cond_dim: 3,
            hidden: vec![8, 8],
            out_dim: 2,
            activation: Activation::Silu,
        };
        assert_eq!(net.param_shapes(), vec![[5, 8], [1, 8], [8, 8], [1, 8], [8, 2], [1, 2]]);
        let p = net.init(&mut RandomStream::new(0, 0));
        let tape = Tape::new();
        let pv: Vec<Var> = p.into_iter().map(|t| tape.constant(t)).collect();
        let x = tape.constant(Tensor::matrix(4, 2, vec![1.0; 8]));
        let c = tape.constant(Tensor::row_vector(vec![0.1, 0.2, 0.3]));
        let y = net.forward(&tape, &pv, x, c);
        assert_eq!(y.shape(), (4, 2));
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }
}
