use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{evaluate, train_with, TrainConfig};
use crate::data::Dataset;
use crate::error::Result;
use crate::exec;
use crate::network::{Model, ModelConfig};

/// Perception mechanisms switched on in an ablation run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationVariant {
    /// Plain DSA: no increments, no weakened branch.
    #[serde(rename = "DSA")]
    Dsa,
    /// Enhancement increment only.
    #[serde(rename = "+EH")]
    Enhance,
    /// Weakened branch with its increment; no enhancement increment.
    #[serde(rename = "+WK")]
    Weaken,
    /// Both mechanisms.
    #[serde(rename = "+CP")]
    Full,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::Dsa,
        AblationVariant::Enhance,
        AblationVariant::Weaken,
        AblationVariant::Full,
    ];

    /// `(enhance, weaken)`.
    pub fn flags(self) -> (bool, bool) {
        match self {
            AblationVariant::Dsa => (false, false),
            AblationVariant::Enhance => (true, false),
            AblationVariant::Weaken => (false, true),
            AblationVariant::Full => (true, true),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AblationVariant::Dsa => "DSA",
            AblationVariant::Enhance => "+EH",
            AblationVariant::Weaken => "+WK",
            AblationVariant::Full => "+CP",
        }
    }

    pub fn apply(self, config: ModelConfig) -> ModelConfig {
        let (e, w) = self.flags();
        config.with_ablation(e, w)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub seeds: Vec<u64>,
    /// Test accuracy per seed.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (0 for a single seed).
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, v: AblationVariant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<6} {:>8} {:>8}  per-seed", "model", "mean", "std");
        for r in &self.rows {
            let per: Vec<String> = r.accuracies.iter().map(|a| format!("{a:.4}")).collect();
            let _ = writeln!(s, "{:<6} {:>8.4} {:>8.4}  {}", r.variant.label(), r.mean, r.std, per.join(" "));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,seed,accuracy\n");
        for r in &self.rows {
            for (seed, a) in r.seeds.iter().zip(&r.accuracies) {
                let _ = writeln!(s, "{},{seed},{a}", r.variant.label());
            }
        }
        s
    }
}

/// Trains every variant once per seed (the seed drives both initialisation
/// and training) and reports test accuracy.
pub fn run_ablation(
    base: &ModelConfig,
    train_config: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    variants: &[AblationVariant],
    seeds: &[u64],
) -> Result<AblationTable> {
    let jobs: Vec<(AblationVariant, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results = exec::map_range(jobs.len(), |j| -> Result<f64> {
        let (variant, seed) = jobs[j];
        let mut cfg = variant.apply(base.clone());
        cfg.seed = seed;
        let mut model = Model::new(cfg)?;
        let tc = TrainConfig {
            seed,
            ..train_config.clone()
        };
        train_with(&mut model, train_set, None, &tc, |_| {})?;
        Ok(evaluate(&model, test_set, tc.batch_size)?.accuracy)
    });
    let results = results.into_iter().collect::<Result<Vec<f64>>>()?;
    let rows = variants
        .iter()
        .enumerate()
        .map(|(vi, &variant)| {
            let acc = results[vi * seeds.len()..(vi + 1) * seeds.len()].to_vec();
            let n = acc.len() as f64;
            let mean = acc.iter().sum::<f64>() / n;
            let std = if acc.len() > 1 {
                (acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            AblationRow {
                variant,
                seeds: seeds.to_vec(),
                accuracies: acc,
                mean,
                std,
            }
        })
        .collect();
    Ok(AblationTable { rows })
}
