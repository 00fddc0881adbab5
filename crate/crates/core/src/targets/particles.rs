use serde::{Deserialize, Serialize};

use crate::numerics::{RandomStream, Tensor};

/// How a flat coordinate vector is split into particles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParticleLayout {
    pub n_particles: usize,
    pub space_dim: usize,
}

impl ParticleLayout {
    pub fn ambient_dim(&self) -> usize {
        self.n_particles * self.space_dim
    }

    /// Dimension of the zero-center-of-gravity subspace.
    pub fn subspace_dim(&self) -> usize {
        (self.n_particles - 1) * self.space_dim
    }

    pub fn center_of_gravity(&self, x: &[f64]) -> Vec<f64> {
        let d = self.space_dim;
        let mut c = vec![0.0; d];
        for p in x.chunks(d) {
            for (a, v) in c.iter_mut().zip(p) {
                *a += v;
            }
        }
        c.iter_mut().for_each(|v| *v /= self.n_particles as f64);
        c
    }

    /// Subtracts the mean particle position in place.
    pub fn project_in_place(&self, x: &mut [f64]) {
        let c = self.center_of_gravity(x);
        for p in x.chunks_mut(self.space_dim) {
            for (v, m) in p.iter_mut().zip(&c) {
                *v -= m;
            }
        }
    }

    /// Largest absolute center-of-gravity coordinate over a batch.
    pub fn max_abs_cog(&self, x: &Tensor) -> f64 {
        x.rows_iter()
            .flat_map(|r| self.center_of_gravity(r))
            .fold(0.0, |m: f64, v| m.max(v.abs()))
    }

    pub fn project_rows(&self, x: &mut Tensor) {
        let c = x.cols();
        for row in x.data_mut().chunks_mut(c) {
            self.project_in_place(row);
        }
    }

    /// Standard normal noise restricted to the zero-CoG subspace.
    pub fn subspace_noise(&self, rows: usize, rng: &mut RandomStream) -> Tensor {
        let mut z = rng.normal_tensor(rows, self.ambient_dim());
        self.project_rows(&mut z);
        z
    }
}

/// Returns `x` with its center of gravity removed.
pub fn project_zero_cog(layout: ParticleLayout, x: &[f64]) -> Vec<f64> {
    let mut y = x.to_vec();
    layout.project_in_place(&mut y);
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    const L: ParticleLayout = ParticleLayout {
        n_particles: 4,
        space_dim: 2,
    };

    #[test]
    fn centered_input_is_unchanged() {
        let x = [1.0, 0.0, -1.0, 0.0, 0.0, 2.0, 0.0, -2.0];
        assert_eq!(project_zero_cog(L, &x), x.to_vec());
    }

    #[test]
    fn identical_particles_collapse_to_origin() {
        let x = [1.0; 8];
        assert_eq!(project_zero_cog(L, &x), vec![0.0; 8]);
    }

    #[test]
    fn projection_is_idempotent() {
        let mut rng = RandomStream::new(1, 0);
        for _ in 0..100 {
            let x: Vec<f64> = (0..8).map(|_| 3.0 * rng.normal()).collect();
            let once = project_zero_cog(L, &x);
            let twice = project_zero_cog(L, &once);
            for (a, b) in once.iter().zip(&twice) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }
}
