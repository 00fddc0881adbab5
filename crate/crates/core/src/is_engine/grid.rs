use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::sha256_hex;
use crate::{EPS, T_MAX};

/// Interleaved time sequences of the alternating proposal and target.
///
/// `t` holds `t_0 < ... < t_N = T`; `tar[n]` and `prop[n]` for
/// `n = 0..N-1` are the times the target and proposal flow maps jump to
/// before their Gaussian kernels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t: Vec<f64>,
    pub tar: Vec<f64>,
    pub prop: Vec<f64>,
}

const REL: f64 = 1e-12;

impl TimeGrid {
    /// Checks every ordering and positivity invariant.
    pub fn new(t: Vec<f64>, tar: Vec<f64>, prop: Vec<f64>) -> Result<Self> {
        let g = Self { t, tar, prop };
        g.validate()?;
        Ok(g)
    }

    pub fn steps(&self) -> usize {
        self.t.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.t.len().saturating_sub(1);
        let bad = |index, message: String| Err(Error::Grid { index, message });
        if n == 0 || self.tar.len() != n || self.prop.len() != n {
            return bad(0, format!(
                "need N >= 1 with N+1 times and N target/proposal times, got {}/{}/{}",
                self.t.len(),
                self.tar.len(),
                self.prop.len()
            ));
        }
        if (self.t[n] - T_MAX).abs() > REL * T_MAX {
            return bad(n, format!("t_N = {} but must equal {T_MAX}", self.t[n]));
        }
        if (self.prop[0] - EPS).abs() > REL * EPS {
            return bad(0, format!("t_0^prop = {} but must equal {EPS}", self.prop[0]));
        }
        let all = self.t.iter().chain(&self.tar).chain(&self.prop);
        if all.clone().any(|v| !v.is_finite()) {
            return bad(0, "non-finite time".into());
        }
        for k in 1..=n {
            let (lo, hi) = (self.t[k - 1], self.t[k]);
            let (tar, prop) = (self.tar[k - 1], self.prop[k - 1]);
            if !(lo < hi) {
                return bad(k, format!("t_{} = {lo} not below t_{k} = {hi}", k - 1));
            }
            if !(prop < lo) || prop < EPS * (1.0 - REL) {
                return bad(k, format!("proposal time {prop} not in [eps, t_{}={lo})", k - 1));
            }
            if !(tar >= lo && tar < hi) {
                return bad(k, format!("target time {tar} not in [{lo}, {hi})"));
            }
            if !(lo * lo - prop * prop > 0.0) {
                return bad(k, "proposal kernel variance is not positive".into());
            }
            if !(hi * hi - tar * tar > 0.0) {
                return bad(k, "target kernel variance is not positive".into());
            }
        }
        Ok(())
    }

    /// Proposal variance of `x_{t_{n-1}} | x_{t_n}`, for `n = 1..N`.
    pub fn proposal_variance(&self, n: usize) -> f64 {
        self.t[n - 1].powi(2) - self.prop[n - 1].powi(2)
    }

    /// Target variance of `x_{t_n} | x_{t_{n-1}}`, for `n = 1..N`.
    pub fn target_variance(&self, n: usize) -> f64 {
        self.t[n].powi(2) - self.tar[n - 1].powi(2)
    }

    pub fn hash(&self) -> String {
        let mut bytes = Vec::new();
        for v in self.t.iter().chain(&self.tar).chain(&self.prop) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        sha256_hex(&bytes)[..16].to_string()
    }

    /// Grid under which proposal and target coincide for `N(mu, v I)` data
    /// with the exact flow map, up to `O(t_0^2 / v)` and the `N(0, T^2 I)`
    /// prior mismatch (log-weight variance near `|mu|^2 / T^2 + d v^2 / 2T^4`).
    ///
    /// `t_1` must be large enough that `tar[0] >= t_0`, which holds when
    /// `2 t_0^2 <= eps^2 + t_1^2` for small times.
    ///
    /// `t` is the full time sequence (with `t_0 > eps`); `tar_frac[n-1]` places
    /// `tar[n]` between its smallest admissible value and `t_{n+1}` for
    /// `n >= 1`. `tar[0]` is then fixed
    /// by `prop[0] = eps`, and each proposal time solves
    /// `v + prop^2 = (v + tar^2)(v + t_{n-1}^2) / (v + t_n^2)`.
    pub fn gaussian_matched(t: Vec<f64>, tar_frac: &[f64], variance: f64) -> Result<Self> {
        let n = t.len().saturating_sub(1);
        if n == 0 || tar_frac.len() + 1 < n {
            return Err(Error::Grid {
                index: 0,
                message: "gaussian_matched needs N >= 1 and N-1 target fractions".into(),
            });
        }
        let v = variance;
        let mut tar = vec![0.0; n];
        let mut prop = vec![EPS; n];
        tar[0] = ((v + EPS * EPS) * (v + t[1] * t[1]) / (v + t[0] * t[0]) - v).max(0.0).sqrt();
        for k in 1..n {
            // Below this target time the matching proposal time drops under eps.
            let floor2 = (v + EPS * EPS) * (v + t[k + 1] * t[k + 1]) / (v + t[k] * t[k]) - v;
            let lo = t[k].max(floor2.max(0.0).sqrt());
            tar[k] = lo + tar_frac[k - 1] * (t[k + 1] - lo);
            let p2 = (v + tar[k] * tar[k]) * (v + t[k] * t[k]) / (v + t[k + 1] * t[k + 1]) - v;
            prop[k] = p2.max(0.0).sqrt();
        }
        Self::new(t, tar, prop)
    }
}
