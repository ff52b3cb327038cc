use std::fmt::Write as _;
use std::path::Path;

use super::checkpoint::Checkpoint;
use super::config::Variant;
use crate::data::{random_erase, IdentityDataset, OcclusionSpec, Split};
use crate::diffcore::Tensor;
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::eval::{rank_queries, retrieval_metrics, RetrievalMetrics};
use crate::seeding::derive_rng;

const QUERY_OCCLUSION_STREAM: u64 = 0x7175_6572;

pub const CSV_HEADER: &str = "variant,seed,s,rank1,rank5,map,loss_final,clamp_events";

/// Evaluation parallelism from `AMDE_THREADS`; 1 when unset or invalid.
pub fn eval_threads() -> usize {
    std::env::var("AMDE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// One line of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub variant: String,
    pub seed: u64,
    pub s: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub map: f64,
    pub loss_final: f64,
    pub clamp_events: usize,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.variant,
            self.seed,
            self.s,
            self.rank1,
            self.rank5,
            self.map,
            self.loss_final,
            self.clamp_events
        )
    }
}

pub fn rows_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_line());
    }
    out
}

pub fn write_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    std::fs::write(path, rows_to_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Queries with every image erased at fraction `s`. The stream depends on
/// `(seed, s)` only, so a level gives the same occlusion whatever list it
/// appears in.
pub fn occlude_queries(queries: &[Tensor], s: f64, seed: u64) -> Result<Vec<Tensor>> {
    let mut rng = derive_rng(seed, &[QUERY_OCCLUSION_STREAM, s.to_bits()]);
    let spec = OcclusionSpec::new(s, seed);
    queries
        .iter()
        .map(|q| random_erase(q, &spec, &mut rng))
        .collect()
}

/// Retrieval metrics of `model` on `dataset`'s query/gallery splits, one
/// entry per occlusion level applied to the queries.
pub fn evaluate_model(
    model: &EncoderModel,
    dataset: &IdentityDataset,
    levels: &[f64],
    seed: u64,
    threads: usize,
) -> Result<Vec<(f64, RetrievalMetrics)>> {
    if dataset.config.input_shape != model.config.input_shape {
        return Err(Error::Config(format!(
            "model expects {:?} images, dataset holds {:?}",
            model.config.input_shape, dataset.config.input_shape
        )));
    }
    let q_idx = dataset.indices(Split::Query);
    let g_idx = dataset.indices(Split::Gallery);
    let q_labels = dataset.labels(&q_idx);
    let g_labels = dataset.labels(&g_idx);
    let queries = dataset.images(&q_idx);
    let gallery = model.embed(&dataset.images(&g_idx))?;
    levels
        .iter()
        .map(|&s| {
            let occluded = occlude_queries(&queries, s, seed)?;
            let q_emb = model.embed(&occluded)?;
            let rankings = rank_queries(&q_emb, &q_labels, &gallery, &g_labels, threads)?;
            Ok((s, retrieval_metrics(&rankings)?))
        })
        .collect()
}

/// Name used in the CSV's `variant` column.
pub fn variant_label(checkpoint: &Checkpoint) -> String {
    match Variant::of(&checkpoint.config) {
        Some(v) => v.name().to_owned(),
        None => format!(
            "{}:{}",
            checkpoint.config.encoder.local_branch.as_str(),
            serde_json::to_value(checkpoint.config.variant)
                .ok()
                .and_then(|v| v.as_str().map(str::to_owned))
                .unwrap_or_default()
        ),
    }
}

/// Metrics table of a checkpoint; queries are occluded with the
/// checkpoint's training seed.
pub fn evaluate(
    checkpoint: &Checkpoint,
    dataset: &IdentityDataset,
    levels: &[f64],
) -> Result<Vec<MetricsRow>> {
    evaluate_with_threads(checkpoint, dataset, levels, eval_threads())
}

pub fn evaluate_with_threads(
    checkpoint: &Checkpoint,
    dataset: &IdentityDataset,
    levels: &[f64],
    threads: usize,
) -> Result<Vec<MetricsRow>> {
    let model = checkpoint.model()?;
    let seed = checkpoint.config.seed;
    let variant = variant_label(checkpoint);
    Ok(evaluate_model(&model, dataset, levels, seed, threads)?
        .into_iter()
        .map(|(s, m)| MetricsRow {
            variant: variant.clone(),
            seed,
            s,
            rank1: m.rank1,
            rank5: m.rank5,
            map: m.map,
            loss_final: checkpoint.final_loss,
            clamp_events: checkpoint.clamp_events,
        })
        .collect())
}
