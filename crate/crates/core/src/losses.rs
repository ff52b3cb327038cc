//! Training objectives.
//!
//! The adaptive nearest-neighbour (ANN) loss averages, per anchor, the
//! `K_a` farthest same-label distances and the `K_a` closest other-label
//! distances and hinges their gap at margin `m`. `K_a` grows with the
//! entropy of the anchor's softmax distribution.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// How the entropy is turned into an integer neighbourhood size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rounding {
    Ceil,
    Floor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnConfig {
    pub margin: f64,
    pub k0: usize,
    pub rounding: Rounding,
    pub lambda: f64,
    /// Bypasses the entropy rule with a constant neighbourhood size.
    pub fixed_k: Option<usize>,
}

impl Default for AnnConfig {
    fn default() -> Self {
        Self {
            margin: 0.3,
            k0: 1,
            rounding: Rounding::Ceil,
            lambda: 1.0,
            fixed_k: None,
        }
    }
}

impl AnnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!(
                "margin must be positive, got {}",
                self.margin
            )));
        }
        if self.k0 == 0 || self.fixed_k == Some(0) {
            return Err(Error::Config(
                "neighbourhood sizes must be at least 1".into(),
            ));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Which metric term joins the softmax loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MetricLoss {
    #[serde(rename = "softmax")]
    None,
    #[serde(rename = "softmax+ann")]
    Ann,
    #[serde(rename = "softmax+triplet")]
    Triplet,
    #[serde(rename = "softmax+contrastive")]
    Contrastive,
}

/// Symmetric `B×B` matrix of squared Euclidean distances.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix(Tensor);

impl DistanceMatrix {
    pub fn from_embeddings(embeddings: &Tensor) -> Result<Self> {
        let mut tape = Tape::new();
        let e = tape.constant(embeddings.clone());
        let d = tape.pairwise_sqdist(e)?;
        Ok(Self(tape.take_value(d)))
    }

    pub fn size(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.0.data()[a * self.size() + b]
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Squared Euclidean distances between all rows of `embeddings: [B, d]`.
pub fn pairwise_sqdist(embeddings: &Tensor) -> Result<DistanceMatrix> {
    DistanceMatrix::from_embeddings(embeddings)
}

/// Numerically stable softmax of one logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / total).collect()
}

/// Natural-log entropy of a probability vector, with `0·ln 0 = 0`.
pub fn class_entropy(p: &[f64]) -> Result<f64> {
    let total: f64 = p.iter().sum();
    if p.is_empty() || p.iter().any(|&v| v.is_nan() || v < 0.0) || (total - 1.0).abs() > 1e-6 {
        return Err(Error::contract(format!(
            "entropy needs a probability vector (sum {total})"
        )));
    }
    Ok(-p
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>())
}

/// `K_a = max(round(H_a), K0)` with the configured rounding.
pub fn adaptive_k(entropy: f64, cfg: &AnnConfig) -> Result<usize> {
    if !entropy.is_finite() || entropy < 0.0 {
        return Err(Error::contract(format!(
            "entropy must be non-negative, got {entropy}"
        )));
    }
    let rounded = match cfg.rounding {
        Rounding::Ceil => entropy.ceil(),
        Rounding::Floor => entropy.floor(),
    } as usize;
    Ok(rounded.max(cfg.k0))
}

/// Same-label (excluding the anchor) and other-label indices for `anchor`.
fn split_neighbours(labels: &[usize], anchor: usize) -> (Vec<usize>, Vec<usize>) {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (j, &l) in labels.iter().enumerate() {
        if j == anchor {
            continue;
        }
        if l == labels[anchor] {
            pos.push(j);
        } else {
            neg.push(j);
        }
    }
    (pos, neg)
}

/// The `k` farthest positives and `k` closest negatives of `anchor`, ties
/// broken by lower batch index.
pub fn hardest_neighbours(
    dist: &DistanceMatrix,
    labels: &[usize],
    anchor: usize,
    k: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let (mut pos, mut neg) = split_neighbours(labels, anchor);
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Sampling {
            anchor,
            reason: format!(
                "{} positives and {} negatives in batch",
                pos.len(),
                neg.len()
            ),
        });
    }
    let d = |j: usize| dist.get(anchor, j);
    pos.sort_by(|&a, &b| d(b).total_cmp(&d(a)).then(a.cmp(&b)));
    neg.sort_by(|&a, &b| d(a).total_cmp(&d(b)).then(a.cmp(&b)));
    pos.truncate(k);
    neg.truncate(k);
    Ok((pos, neg))
}

/// Per-anchor bookkeeping of one ANN evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnnStats {
    pub entropies: Vec<f64>,
    /// Neighbourhood size requested by the entropy rule.
    pub requested_k: Vec<usize>,
    /// Neighbourhood size after clamping to available positives/negatives.
    pub used_k: Vec<usize>,
    pub clamp_events: usize,
}

fn check_batch(tape: &Tape, embeddings: Var, labels: &[usize]) -> Result<usize> {
    let shape = tape.shape(embeddings);
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Dimension {
            op: "metric loss",
            lhs: shape.to_vec(),
            rhs: vec![labels.len()],
        });
    }
    if labels.len() < 2 {
        return Err(Error::contract("metric losses need at least two samples"));
    }
    Ok(labels.len())
}

/// `Σ_a [m + D_ap − D_an]_+` where each anchor's distance averages use the
/// selection weights in `pos_w`/`neg_w` (`B×B`, row per anchor).
fn weighted_hinge(
    tape: &mut Tape,
    dist: Var,
    pos_w: Vec<f64>,
    neg_w: Vec<f64>,
    batch: usize,
    margin: f64,
) -> Result<Var> {
    let pw = tape.constant(Tensor::new(vec![batch, batch], pos_w)?);
    let nw = tape.constant(Tensor::new(vec![batch, batch], neg_w)?);
    let dp = tape.hadamard(dist, pw)?;
    let dp = tape.sum(dp, &[1])?;
    let dn = tape.hadamard(dist, nw)?;
    let dn = tape.sum(dn, &[1])?;
    let gap = tape.sub(dp, dn)?;
    let gap = tape.add_scalar(gap, margin)?;
    let hinge = tape.relu(gap)?;
    tape.sum_all(hinge)
}

/// Hinge over averaged hardest neighbourhoods with one `k` per anchor.
fn neighbourhood_hinge(
    tape: &mut Tape,
    embeddings: Var,
    labels: &[usize],
    ks: &[usize],
    margin: f64,
) -> Result<Var> {
    let batch = check_batch(tape, embeddings, labels)?;
    let dist = tape.pairwise_sqdist(embeddings)?;
    let values = DistanceMatrix(tape.value(dist).clone());
    let mut pos_w = vec![0.0; batch * batch];
    let mut neg_w = vec![0.0; batch * batch];
    for (a, &k) in ks.iter().enumerate() {
        let (pos, neg) = hardest_neighbours(&values, labels, a, k)?;
        let w = 1.0 / k as f64;
        for p in pos {
            pos_w[a * batch + p] = w;
        }
        for n in neg {
            neg_w[a * batch + n] = w;
        }
    }
    weighted_hinge(tape, dist, pos_w, neg_w, batch, margin)
}

/// Per-anchor `K_a`: entropy rule (or `fixed_k`), clamped to what the batch
/// holds. Logits are read as plain values, so no gradient reaches them here.
pub fn neighbourhood_sizes(logits: &Tensor, labels: &[usize], cfg: &AnnConfig) -> Result<AnnStats> {
    let mut stats = AnnStats::default();
    for a in 0..labels.len() {
        let (pos, neg) = split_neighbours(labels, a);
        if pos.is_empty() || neg.is_empty() {
            return Err(Error::Sampling {
                anchor: a,
                reason: format!(
                    "{} positives and {} negatives in batch",
                    pos.len(),
                    neg.len()
                ),
            });
        }
        let entropy = class_entropy(&softmax(logits.row(a)))?;
        let requested = match cfg.fixed_k {
            Some(k) => k,
            None => adaptive_k(entropy, cfg)?,
        };
        let available = pos.len().min(neg.len());
        if requested > available {
            stats.clamp_events += 1;
        }
        stats.entropies.push(entropy);
        stats.requested_k.push(requested);
        stats.used_k.push(requested.min(available));
    }
    Ok(stats)
}

/// ANN loss of a batch; `logits` only drive the neighbourhood sizes.
pub fn ann_loss(
    tape: &mut Tape,
    embeddings: Var,
    logits: Var,
    labels: &[usize],
    cfg: &AnnConfig,
) -> Result<(Var, AnnStats)> {
    check_batch(tape, embeddings, labels)?;
    if tape.shape(logits).first() != Some(&labels.len()) {
        return Err(Error::Dimension {
            op: "ann_loss",
            lhs: tape.shape(logits).to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let stats = neighbourhood_sizes(tape.value(logits), labels, cfg)?;
    let loss = neighbourhood_hinge(tape, embeddings, labels, &stats.used_k, cfg.margin)?;
    Ok((loss, stats))
}

/// Batch-hard triplet loss: hardest positive against closest negative per
/// anchor, hinged at `margin` and summed.
pub fn batch_hard_triplet(
    tape: &mut Tape,
    embeddings: Var,
    labels: &[usize],
    margin: f64,
) -> Result<Var> {
    let ks = vec![1; labels.len()];
    neighbourhood_hinge(tape, embeddings, labels, &ks, margin)
}

/// Sum over unordered pairs: same-label pairs add their squared distance,
/// other-label pairs add `max(0, margin − distance)²`.
pub fn contrastive_loss(
    tape: &mut Tape,
    embeddings: Var,
    labels: &[usize],
    margin: f64,
) -> Result<Var> {
    let batch = check_batch(tape, embeddings, labels)?;
    let dist = tape.pairwise_sqdist(embeddings)?;
    let mut same = Vec::new();
    let mut diff = Vec::new();
    for a in 0..batch {
        for b in (a + 1)..batch {
            if labels[a] == labels[b] {
                same.push(a * batch + b);
            } else {
                diff.push(a * batch + b);
            }
        }
    }
    let mut terms = Vec::new();
    if !same.is_empty() {
        let s = tape.gather(dist, &same)?;
        terms.push(tape.sum_all(s)?);
    }
    if !diff.is_empty() {
        let d = tape.gather(dist, &diff)?;
        let r = tape.sqrt(d)?;
        let r = tape.scale(r, -1.0)?;
        let r = tape.add_scalar(r, margin)?;
        let r = tape.relu(r)?;
        let r = tape.hadamard(r, r)?;
        terms.push(tape.sum_all(r)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

/// Mean over the batch of `−log softmax(logits)[label]`.
pub fn softmax_xent(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
        return Err(Error::Dimension {
            op: "softmax_xent",
            lhs: shape,
            rhs: vec![labels.len()],
        });
    }
    let classes = shape[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::contract(format!(
            "label {bad} outside [0, {classes})"
        )));
    }
    let logp = tape.log_softmax(logits)?;
    let idx: Vec<usize> = labels
        .iter()
        .enumerate()
        .map(|(r, &l)| r * classes + l)
        .collect();
    let picked = tape.gather(logp, &idx)?;
    let mean = tape.mean_all(picked)?;
    tape.scale(mean, -1.0)
}

/// Handles of one joint-loss evaluation.
#[derive(Clone, Debug)]
pub struct JointLoss {
    pub total: Var,
    pub softmax: Var,
    pub metric: Option<Var>,
    pub stats: Option<AnnStats>,
}

/// `L_softmax + λ·L_metric`. With `λ = 0` the total is the softmax term
/// itself; the metric term is still evaluated for reporting.
pub fn joint_loss(
    tape: &mut Tape,
    embeddings: Var,
    logits: Var,
    labels: &[usize],
    metric: MetricLoss,
    cfg: &AnnConfig,
) -> Result<JointLoss> {
    let softmax = softmax_xent(tape, logits, labels)?;
    let (metric_var, stats) = match metric {
        MetricLoss::None => (None, None),
        MetricLoss::Ann => {
            let (l, s) = ann_loss(tape, embeddings, logits, labels, cfg)?;
            (Some(l), Some(s))
        }
        MetricLoss::Triplet => (
            Some(batch_hard_triplet(tape, embeddings, labels, cfg.margin)?),
            None,
        ),
        MetricLoss::Contrastive => (
            Some(contrastive_loss(tape, embeddings, labels, cfg.margin)?),
            None,
        ),
    };
    let total = match metric_var {
        Some(m) if cfg.lambda != 0.0 => {
            let weighted = tape.scale(m, cfg.lambda)?;
            tape.add(softmax, weighted)?
        }
        _ => softmax,
    };
    Ok(JointLoss {
        total,
        softmax,
        metric: metric_var,
        stats,
    })
}

/// Embeddings, logits and labels of one batch, for evaluating losses
/// outside a training step.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchEmbeddings {
    pub embeddings: Tensor,
    pub logits: Tensor,
    pub labels: Vec<usize>,
}

impl BatchEmbeddings {
    fn eval<F>(&self, f: F) -> Result<f64>
    where
        F: FnOnce(&mut Tape, Var, Var) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let e = tape.constant(self.embeddings.clone());
        let l = tape.constant(self.logits.clone());
        let out = f(&mut tape, e, l)?;
        tape.value(out).item()
    }

    pub fn ann_loss(&self, cfg: &AnnConfig) -> Result<f64> {
        self.eval(|t, e, l| ann_loss(t, e, l, &self.labels, cfg).map(|(v, _)| v))
    }

    pub fn batch_hard_triplet(&self, margin: f64) -> Result<f64> {
        self.eval(|t, e, _| batch_hard_triplet(t, e, &self.labels, margin))
    }

    pub fn contrastive_loss(&self, margin: f64) -> Result<f64> {
        self.eval(|t, e, _| contrastive_loss(t, e, &self.labels, margin))
    }

    pub fn softmax_xent(&self) -> Result<f64> {
        self.eval(|t, _, l| softmax_xent(t, l, &self.labels))
    }

    pub fn joint_loss(&self, metric: MetricLoss, cfg: &AnnConfig) -> Result<f64> {
        self.eval(|t, e, l| joint_loss(t, e, l, &self.labels, metric, cfg).map(|j| j.total))
    }
}
