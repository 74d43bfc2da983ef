use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Schedule {
    Constant,
    /// Multiply by `gamma` every `period` epochs.
    Step { gamma: f64, period: usize },
    /// Multiply by `gamma` at each milestone epoch.
    Multistep { gamma: f64, milestones: Vec<usize> },
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        match self {
            Schedule::Constant => Ok(()),
            Schedule::Step { gamma, period } => {
                if *period == 0 {
                    return Err(Error::config("step schedule period must be at least 1"));
                }
                check_gamma(*gamma)
            }
            Schedule::Multistep { gamma, milestones } => {
                if milestones.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::config("multistep milestones must be strictly increasing"));
                }
                check_gamma(*gamma)
            }
        }
    }

    /// Number of decays applied by `epoch` (0-based).
    pub fn decays(&self, epoch: usize) -> usize {
        match self {
            Schedule::Constant => 0,
            Schedule::Step { period, .. } => epoch / period,
            Schedule::Multistep { milestones, .. } => milestones.iter().filter(|&&m| epoch >= m).count(),
        }
    }

    pub fn gamma(&self) -> f64 {
        match self {
            Schedule::Constant => 1.0,
            Schedule::Step { gamma, .. } | Schedule::Multistep { gamma, .. } => *gamma,
        }
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("schedule gamma {gamma} must be positive")))
    }
}

/// `lr * gamma^k` with `k` decays applied by `epoch`. When `1/gamma` is an
/// integer the decay is applied as a division by `(1/gamma)^k`, so that
/// `0.1` decays to exactly `0.01` and `0.001`.
pub fn schedule_lr(lr: f64, schedule: &Schedule, epoch: usize) -> f64 {
    let k = schedule.decays(epoch) as i32;
    if k == 0 {
        return lr;
    }
    let gamma = schedule.gamma();
    let inv = (1.0 / gamma).round();
    if inv >= 2.0 && (1.0 / inv - gamma).abs() <= f64::EPSILON * gamma {
        lr / inv.powi(k)
    } else {
        lr * gamma.powi(k)
    }
}
