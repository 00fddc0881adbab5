use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ScheduleRule {
    Log,
    Rho { rho: f64 },
    Explicit,
}

/// Increasing times `t_0 = eps < ... < t_N = T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    times: Vec<f64>,
    rule: ScheduleRule,
}

impl Schedule {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn rule(&self) -> &ScheduleRule {
        &self.rule
    }

    /// Number of steps `N`.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    /// Validated explicit schedule.
    pub fn explicit(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::Domain("a schedule needs at least two times".into()));
        }
        if times[0] <= 0.0 || times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Domain("schedule times must be positive and strictly increasing".into()));
        }
        Ok(Self {
            times,
            rule: ScheduleRule::Explicit,
        })
    }
}

fn check(n: usize, eps: f64, t_max: f64) -> Result<()> {
    if n == 0 {
        return Err(Error::Domain("degenerate schedule: N = 0".into()));
    }
    if !(eps > 0.0 && t_max > eps) {
        return Err(Error::Domain(format!("need 0 < eps < T, got {eps}, {t_max}")));
    }
    Ok(())
}

/// Geometric progression `t_i = eps (T/eps)^(i/N)`.
pub fn log_schedule(n: usize, eps: f64, t_max: f64) -> Result<Schedule> {
    check(n, eps, t_max)?;
    let ratio = (t_max / eps).ln();
    let mut times: Vec<f64> = (0..=n)
        .map(|i| eps * (ratio * i as f64 / n as f64).exp())
        .collect();
    times[n] = t_max;
    Ok(Schedule {
        times,
        rule: ScheduleRule::Log,
    })
}

/// Power-law spacing `(eps^(1/rho) + i/N (T^(1/rho) - eps^(1/rho)))^rho`.
pub fn rho_schedule(n: usize, eps: f64, t_max: f64, rho: f64) -> Result<Schedule> {
    check(n, eps, t_max)?;
    if !(rho > 0.0) {
        return Err(Error::Domain(format!("rho {rho}")));
    }
    let (a, b) = (eps.powf(1.0 / rho), t_max.powf(1.0 / rho));
    let mut times: Vec<f64> = (0..=n)
        .map(|i| (a + i as f64 / n as f64 * (b - a)).powf(rho))
        .collect();
    times[0] = eps;
    times[n] = t_max;
    Ok(Schedule {
        times,
        rule: ScheduleRule::Rho { rho },
    })
}
