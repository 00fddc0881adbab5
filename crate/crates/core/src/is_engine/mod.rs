//! Joint-trajectory importance sampling: the DDPM baseline, the alternating
//! flow-map proposal and target, and self-normalized estimation.

mod baseline;
mod bctm;
mod estimate;
mod grid;

pub use baseline::baseline_ddpm_is;
pub use bctm::{bctm_is, proposal_rollout, target_log_density};
pub use estimate::{ess, ess_from_log_weights, normalized_weights, snis_estimate, snis_from_values};
pub use grid::TimeGrid;

use std::f64::consts::PI;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{RandomStream, Tensor};
use crate::sampling::write_samples_csv;

/// Samples per independently seeded shard.
pub(crate) const SHARD: usize = 8192;

/// K terminal samples with log importance weights.
#[derive(Clone, Debug)]
pub struct WeightedEnsemble {
    pub samples: Tensor,
    pub log_weights: Vec<f64>,
    /// `trajectory[n]` holds all K states at `t_n` when recorded.
    pub trajectory: Option<Vec<Tensor>>,
    /// Network evaluations per sample.
    pub nfe: usize,
    pub seed: u64,
    pub grid_hash: String,
    pub pipeline: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    pipeline: &'a str,
    seed: u64,
    nfe: usize,
    samples: usize,
    dim: usize,
    grid_hash: &'a str,
    grid: Option<&'a TimeGrid>,
    model_hash: Option<&'a str>,
    ess: f64,
}

impl WeightedEnsemble {
    pub(crate) fn checked(self) -> Result<Self> {
        if self.log_weights.len() != self.samples.rows() {
            return Err(Error::Contract(format!(
                "{} log-weights for {} samples",
                self.log_weights.len(),
                self.samples.rows()
            )));
        }
        if let Some(i) = self.log_weights.iter().position(|w| w.is_nan() || *w == f64::INFINITY) {
            return Err(Error::DegenerateEnsemble(format!("log-weight {i} is {}", self.log_weights[i])));
        }
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn export(&self, dir: &Path, stem: &str, grid: Option<&TimeGrid>, model_hash: Option<&str>) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = vec![
            ("pipeline".to_string(), self.pipeline.clone()),
            ("seed".to_string(), self.seed.to_string()),
            ("nfe".to_string(), self.nfe.to_string()),
            ("grid_hash".to_string(), self.grid_hash.clone()),
        ];
        write_samples_csv(&dir.join(format!("{stem}.csv")), &self.samples, Some(&self.log_weights), &meta)?;
        let m = Manifest {
            pipeline: &self.pipeline,
            seed: self.seed,
            nfe: self.nfe,
            samples: self.len(),
            dim: self.samples.cols(),
            grid_hash: &self.grid_hash,
            grid,
            model_hash,
            ess: ess(self)?,
        };
        let path = dir.join(format!("{stem}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&m)?).map_err(|e| Error::io(&path, e))
    }
}

/// Row-wise `log N(x_i; mean_i, variance I)` with normalizer dimension `dim`.
pub(crate) fn row_log_normal(x: &Tensor, mean: &Tensor, variance: f64, dim: usize) -> Result<Vec<f64>> {
    x.check_same_shape(mean)?;
    if !(variance > 0.0) {
        return Err(Error::Domain(format!("non-positive kernel variance {variance}")));
    }
    let c = -0.5 * dim as f64 * (2.0 * PI * variance).ln();
    Ok(x
        .rows_iter()
        .zip(mean.rows_iter())
        .map(|(a, b)| c - a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / (2.0 * variance))
        .collect())
}

/// Splits `k` samples into shards, each with its own substream of a fresh
/// base stream drawn from `rng`, so results do not depend on thread count.
pub(crate) fn shards(k: usize, rng: &mut RandomStream) -> Vec<(usize, RandomStream)> {
    let tag = (rng.uniform() * 9.007_199_254_740_992e15) as u64;
    let base = rng.substream(tag);
    (0..k.div_ceil(SHARD))
        .map(|i| (SHARD.min(k - i * SHARD), base.substream(i as u64)))
        .collect()
}

pub(crate) fn add_into(acc: &mut [f64], terms: &[f64]) {
    for (a, t) in acc.iter_mut().zip(terms) {
        *a += t;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gaussian_log_density_slice;

    #[test]
    fn row_log_normal_matches_scalar_helper() {
        let mut r = RandomStream::new(0, 0);
        let x = r.normal_tensor(5, 3);
        let m = r.normal_tensor(5, 3);
        let got = row_log_normal(&x, &m, 0.7, 2).unwrap();
        for i in 0..5 {
            let want = gaussian_log_density_slice(x.row(i), m.row(i), 0.7, 2).unwrap();
            assert!((got[i] - want).abs() < 1e-13);
        }
    }

    #[test]
    fn shard_sizes_cover_k() {
        let mut r = RandomStream::new(1, 0);
        let s = shards(2 * SHARD + 5, &mut r);
        assert_eq!(s.iter().map(|p| p.0).collect::<Vec<_>>(), vec![SHARD, SHARD, 5]);
    }
}
