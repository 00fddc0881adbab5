use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Test functions whose expectations are estimated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestFunction {
    LogL2Norm,
    LogL1Norm,
    CosL2Norm,
}

impl TestFunction {
    pub const ALL: [TestFunction; 3] = [Self::LogL2Norm, Self::LogL1Norm, Self::CosL2Norm];

    pub fn tag(&self) -> &'static str {
        match self {
            Self::LogL2Norm => "log_l2_norm",
            Self::LogL1Norm => "log_l1_norm",
            Self::CosL2Norm => "cos_l2_norm",
        }
    }

    pub fn parse(tag: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.tag() == tag)
            .ok_or_else(|| Error::Config(format!("unknown test function `{tag}`")))
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        let l2 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        match self {
            Self::LogL2Norm | Self::LogL1Norm if l2 == 0.0 => Err(Error::Domain(format!(
                "{} undefined at the origin",
                self.tag()
            ))),
            Self::LogL2Norm => Ok(l2.ln()),
            Self::LogL1Norm => Ok(x.iter().map(|v| v.abs()).sum::<f64>().ln()),
            Self::CosL2Norm => Ok(l2.cos()),
        }
    }
}

/// Evaluates a test function on every row.
pub fn eval_test_function(phi: TestFunction, x: &crate::numerics::Tensor) -> Result<Vec<f64>> {
    x.rows_iter().map(|r| phi.eval(r)).collect()
}
