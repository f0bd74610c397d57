//! Paired comparison of the three weighting modes on a noisy synthetic task.
//!
//! Every mode trains on the same data with the same seed, so batch sequences
//! and initial parameters coincide and only the pair weighting differs.

use serde::Serialize;

use crate::data::{synthetic_task, SynthConfig};
use crate::error::Result;
use crate::mining::Mode;
use crate::trainer::{train, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    /// Dataset shape; the seed field is overwritten per run.
    pub synth: SynthConfig,
    pub train_classes: usize,
    pub seeds: Vec<u64>,
    /// Training settings; mode and seed are overwritten per run.
    pub train: TrainConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig {
                n_classes: 20,
                per_class: 200,
                outlier_rate: 0.2,
                ..SynthConfig::default()
            },
            train_classes: 10,
            seeds: vec![0, 1, 2],
            train: TrainConfig {
                epochs: 50,
                ks: vec![1],
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub seed: u64,
    pub initial_recall_at_1: f64,
    pub recall_at_1: f64,
    pub map: f64,
    pub outlier_caa_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub runs: Vec<RunSummary>,
}

impl AblationReport {
    fn of_mode(&self, mode: Mode) -> impl Iterator<Item = &RunSummary> {
        self.runs.iter().filter(move |r| r.mode == mode)
    }

    /// Mean final Recall@1 over seeds.
    pub fn mean_recall_at_1(&self, mode: Mode) -> f64 {
        let vals: Vec<f64> = self.of_mode(mode).map(|r| r.recall_at_1).collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }

    pub fn caa_gaps(&self, mode: Mode) -> Vec<f64> {
        self.of_mode(mode).map(|r| r.outlier_caa_gap).collect()
    }
}

/// Trains one run per (mode, seed).
pub fn run_ablation(cfg: &AblationConfig, modes: &[Mode]) -> Result<AblationReport> {
    let mut runs = Vec::with_capacity(modes.len() * cfg.seeds.len());
    for &seed in &cfg.seeds {
        let synth = SynthConfig {
            seed,
            ..cfg.synth.clone()
        };
        let (train_ds, test_ds) = synthetic_task(&synth, cfg.train_classes)?;
        for &mode in modes {
            let train_cfg = TrainConfig {
                mode,
                seed,
                ks: vec![1],
                ..cfg.train.clone()
            };
            let out = train(&train_ds, &test_ds, &train_cfg, None)?;
            let last = out.records.last().expect("at least one epoch");
            let eval = last.eval.as_ref().expect("final epoch is evaluated");
            runs.push(RunSummary {
                mode,
                seed,
                initial_recall_at_1: out.initial_eval.as_ref().map_or(0.0, |e| e.recall_at[&1]),
                recall_at_1: eval.recall_at[&1],
                map: eval.map,
                outlier_caa_gap: last.outlier_caa_gap,
            });
        }
    }
    Ok(AblationReport { runs })
}
