use std::fmt::Write as _;

use super::config::{TrainConfig, Variant};
use super::evaluate::{evaluate_with_threads, MetricsRow};
use super::train::train;
use crate::error::Result;

/// A grid cell that failed to train or evaluate.
#[derive(Clone, Debug, PartialEq)]
pub struct FailedCell {
    pub variant: Variant,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationReport {
    /// One row per (variant, seed, level), in grid order. Failed cells
    /// contribute rows with NaN metrics.
    pub rows: Vec<MetricsRow>,
    pub failures: Vec<FailedCell>,
}

/// Mean and sample standard deviation of one (variant, level) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub variant: String,
    pub s: f64,
    pub seeds: usize,
    pub rank1_mean: f64,
    pub rank1_std: f64,
    pub rank5_mean: f64,
    pub rank5_std: f64,
    pub map_mean: f64,
    pub map_std: f64,
}

pub const SUMMARY_HEADER: &str =
    "variant,s,seeds,rank1_mean,rank1_std,rank5_mean,rank5_std,map_mean,map_std";

/// Seeds used for `count` ablation repeats starting from `base`.
pub fn ablation_seeds(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base + i).collect()
}

/// Trains and evaluates `variants × seeds`, one row per occlusion level in
/// `base.occlusion_eval_s`. A failing cell is recorded and the run goes on.
pub fn ablate_variants(
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    threads: usize,
) -> AblationReport {
    let mut report = AblationReport::default();
    for &variant in variants {
        for &seed in seeds {
            let mut cfg = variant.apply(base);
            cfg.seed = seed;
            let run = || -> Result<Vec<MetricsRow>> {
                let outcome = train(&cfg)?;
                evaluate_with_threads(
                    &outcome.checkpoint,
                    &outcome.dataset,
                    &cfg.occlusion_eval_s,
                    threads,
                )
            };
            match run() {
                Ok(rows) => report.rows.extend(rows),
                Err(e) => {
                    report.failures.push(FailedCell {
                        variant,
                        seed,
                        error: e.to_string(),
                    });
                    report
                        .rows
                        .extend(cfg.occlusion_eval_s.iter().map(|&s| MetricsRow {
                            variant: variant.name().to_owned(),
                            seed,
                            s,
                            rank1: f64::NAN,
                            rank5: f64::NAN,
                            map: f64::NAN,
                            loss_final: f64::NAN,
                            clamp_events: 0,
                        }));
                }
            }
        }
    }
    report
}

/// The full nine-variant grid.
pub fn ablate(base: &TrainConfig, seeds: &[u64], threads: usize) -> AblationReport {
    ablate_variants(base, &Variant::ALL, seeds, threads)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl AblationReport {
    /// Per (variant, level) aggregates, in first-appearance order.
    pub fn summary(&self) -> Vec<CellSummary> {
        let mut keys: Vec<(String, u64)> = Vec::new();
        for r in &self.rows {
            let key = (r.variant.clone(), r.s.to_bits());
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        keys.into_iter()
            .map(|(variant, bits)| {
                let cell: Vec<&MetricsRow> = self
                    .rows
                    .iter()
                    .filter(|r| r.variant == variant && r.s.to_bits() == bits)
                    .collect();
                let col = |f: fn(&MetricsRow) -> f64| {
                    mean_std(&cell.iter().map(|r| f(r)).collect::<Vec<_>>())
                };
                let (rank1_mean, rank1_std) = col(|r| r.rank1);
                let (rank5_mean, rank5_std) = col(|r| r.rank5);
                let (map_mean, map_std) = col(|r| r.map);
                CellSummary {
                    variant,
                    s: f64::from_bits(bits),
                    seeds: cell.len(),
                    rank1_mean,
                    rank1_std,
                    rank5_mean,
                    rank5_std,
                    map_mean,
                    map_std,
                }
            })
            .collect()
    }

    /// Mean rank-1 of `variant` at level `s`, if present.
    pub fn mean_rank1(&self, variant: Variant, s: f64) -> Option<f64> {
        self.summary()
            .into_iter()
            .find(|c| c.variant == variant.name() && c.s == s)
            .map(|c| c.rank1_mean)
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from(SUMMARY_HEADER);
        out.push('\n');
        for c in self.summary() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                c.variant,
                c.s,
                c.seeds,
                c.rank1_mean,
                c.rank1_std,
                c.rank5_mean,
                c.rank5_std,
                c.map_mean,
                c.map_std
            );
        }
        out
    }
}
