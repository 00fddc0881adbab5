use serde::{Deserialize, Serialize};

use super::particles::ParticleLayout;
use crate::error::{Error, Result};

/// Pairwise double-well particle system, `p(x) ∝ exp(-E(x)/τ)` with
/// `E(x) = Σ_{i<j} a(d_ij - d0) + b(d_ij - d0)^2 + c(d_ij - d0)^4`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DwTarget {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub rest_distance: f64,
    pub temperature: f64,
    pub n_particles: usize,
    pub space_dim: usize,
}

impl Default for DwTarget {
    fn default() -> Self {
        Self {
            a: 0.0,
            b: -4.0,
            c: 0.9,
            rest_distance: 4.0,
            temperature: 1.0,
            n_particles: 4,
            space_dim: 2,
        }
    }
}

impl DwTarget {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature {}", self.temperature)));
        }
        if self.n_particles < 2 || self.space_dim == 0 {
            return Err(Error::Config("need at least two particles".into()));
        }
        if ![self.a, self.b, self.c, self.rest_distance].iter().all(|v| v.is_finite()) {
            return Err(Error::Config("non-finite pair coefficient".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> ParticleLayout {
        ParticleLayout {
            n_particles: self.n_particles,
            space_dim: self.space_dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.n_particles * self.space_dim
    }

    /// Energy of one pair at distance `d`.
    pub fn pair_energy(&self, d: f64) -> f64 {
        let r = d - self.rest_distance;
        let r2 = r * r;
        self.a * r + self.b * r2 + self.c * r2 * r2
    }

    pub fn energy(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!(
                "expected {} coordinates, got {}",
                self.dim(),
                x.len()
            )));
        }
        let k = self.space_dim;
        let mut e = 0.0;
        for i in 0..self.n_particles {
            for j in i + 1..self.n_particles {
                let d: f64 = (0..k)
                    .map(|q| (x[i * k + q] - x[j * k + q]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                e += self.pair_energy(d);
            }
        }
        Ok(e)
    }

    /// `-E(x)/τ`.
    pub fn unnorm_log_density(&self, x: &[f64]) -> Result<f64> {
        Ok(-self.energy(x)? / self.temperature)
    }

    /// All pairwise distances of one configuration.
    pub fn pair_distances(&self, x: &[f64]) -> Vec<f64> {
        let k = self.space_dim;
        let mut out = Vec::new();
        for i in 0..self.n_particles {
            for j in i + 1..self.n_particles {
                out.push(
                    (0..k)
                        .map(|q| (x[i * k + q] - x[j * k + q]).powi(2))
                        .sum::<f64>()
                        .sqrt(),
                );
            }
        }
        out
    }

    /// Particles on a regular polygon with side `rest_distance`, centered.
    pub fn rest_configuration(&self) -> Vec<f64> {
        let n = self.n_particles;
        let k = self.space_dim;
        let radius = self.rest_distance / (2.0 * (std::f64::consts::PI / n as f64).sin());
        let mut x = vec![0.0; n * k];
        for i in 0..n {
            let ang = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            x[i * k] = radius * ang.cos();
            if k > 1 {
                x[i * k + 1] = radius * ang.sin();
            }
        }
        self.layout().project_in_place(&mut x);
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RandomStream;

    fn rotate(x: &[f64], th: f64) -> Vec<f64> {
        let (s, c) = th.sin_cos();
        x.chunks(2)
            .flat_map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]])
            .collect()
    }

    #[test]
    fn equal_distances_at_rest_give_zero_energy() {
        // Three particles on an equilateral triangle of side d0.
        let t = DwTarget {
            n_particles: 3,
            ..DwTarget::default()
        };
        let x = t.rest_configuration();
        for d in t.pair_distances(&x) {
            assert!((d - 4.0).abs() < 1e-12);
        }
        assert!(t.unnorm_log_density(&x).unwrap().abs() < 1e-10);
    }

    #[test]
    fn wrong_dimension_is_shape_error() {
        assert!(matches!(
            DwTarget::default().energy(&[0.0; 6]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn invariant_under_rigid_motions_and_permutations() {
        let t = DwTarget::default();
        let mut rng = RandomStream::new(1, 0);
        for _ in 0..200 {
            let x: Vec<f64> = (0..8).map(|_| 3.0 * rng.normal()).collect();
            let e = t.energy(&x).unwrap();
            let th = 2.0 * std::f64::consts::PI * rng.uniform();
            let (dx, dy) = (10.0 * rng.normal(), 10.0 * rng.normal());
            let mut y = rotate(&x, th);
            for p in y.chunks_mut(2) {
                p[0] += dx;
                p[1] += dy;
            }
            assert!((t.energy(&y).unwrap() - e).abs() < 1e-10 * (1.0 + e.abs()));
            let mut perm = [0usize, 1, 2, 3];
            for i in (1..4).rev() {
                perm.swap(i, rng.below(i + 1));
            }
            let z: Vec<f64> = perm.iter().flat_map(|&i| [x[2 * i], x[2 * i + 1]]).collect();
            assert!((t.energy(&z).unwrap() - e).abs() < 1e-10 * (1.0 + e.abs()));
        }
    }

    #[test]
    fn pair_energy_hand_values() {
        let t = DwTarget::default();
        assert_eq!(t.pair_energy(4.0), 0.0);
        assert!((t.pair_energy(5.0) - (-4.0 + 0.9)).abs() < 1e-14);
        assert!((t.pair_energy(2.0) - (-16.0 + 0.9 * 16.0)).abs() < 1e-14);
    }
}
