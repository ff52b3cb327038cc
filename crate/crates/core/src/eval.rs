//! Retrieval metrics: distance ranking, CMC at rank k and mean average
//! precision. Single-shot protocol with no camera filtering.

use rayon::prelude::*;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// One query's gallery ordering.
#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    /// Gallery indices by ascending squared distance, ties by index.
    pub order: Vec<usize>,
    /// Distances along `order`.
    pub distances: Vec<f64>,
    /// Whether each entry of `order` shares the query's identity.
    pub relevant: Vec<bool>,
}

impl Ranking {
    pub fn num_relevant(&self) -> usize {
        self.relevant.iter().filter(|&&r| r).count()
    }

    /// 1-based rank of the first relevant item.
    pub fn first_hit(&self) -> Option<usize> {
        self.relevant.iter().position(|&r| r).map(|p| p + 1)
    }
}

fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn gallery_dims(gallery: &Tensor) -> Result<(usize, usize)> {
    match *gallery.shape() {
        [g, d] => Ok((g, d)),
        _ => Err(Error::Dimension {
            op: "rank_gallery",
            lhs: gallery.shape().to_vec(),
            rhs: vec![0, 0],
        }),
    }
}

fn ordered(query: &[f64], gallery: &Tensor) -> Result<(Vec<usize>, Vec<f64>)> {
    let (g, d) = gallery_dims(gallery)?;
    if query.len() != d {
        return Err(Error::Dimension {
            op: "rank_gallery",
            lhs: vec![query.len()],
            rhs: gallery.shape().to_vec(),
        });
    }
    let dists: Vec<f64> = (0..g).map(|i| sqdist(query, gallery.row(i))).collect();
    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(a.cmp(&b)));
    let sorted = order.iter().map(|&i| dists[i]).collect();
    Ok((order, sorted))
}

/// Gallery indices sorted by squared Euclidean distance to `query`.
pub fn rank_gallery(query: &[f64], gallery: &Tensor) -> Result<Vec<usize>> {
    ordered(query, gallery).map(|(order, _)| order)
}

/// Rankings for every query row against the gallery. `threads > 1` fans
/// out across queries; results do not depend on the thread count.
pub fn rank_queries(
    queries: &Tensor,
    query_labels: &[usize],
    gallery: &Tensor,
    gallery_labels: &[usize],
    threads: usize,
) -> Result<Vec<Ranking>> {
    let (q, _) = gallery_dims(queries)?;
    let (g, _) = gallery_dims(gallery)?;
    if q != query_labels.len() || g != gallery_labels.len() {
        return Err(Error::Dimension {
            op: "rank_queries",
            lhs: vec![q, g],
            rhs: vec![query_labels.len(), gallery_labels.len()],
        });
    }
    let one = |i: usize| -> Result<Ranking> {
        let (order, distances) = ordered(queries.row(i), gallery)?;
        let relevant = order
            .iter()
            .map(|&j| gallery_labels[j] == query_labels[i])
            .collect();
        Ok(Ranking {
            order,
            distances,
            relevant,
        })
    };
    if threads <= 1 {
        return (0..q).map(one).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| (0..q).into_par_iter().map(one).collect())
}

fn check_protocol(results: &[Ranking]) -> Result<()> {
    if results.is_empty() {
        return Err(Error::contract("no queries to evaluate"));
    }
    if let Some(q) = results.iter().position(|r| r.num_relevant() == 0) {
        return Err(Error::Protocol { query: q });
    }
    Ok(())
}

/// Fraction of queries with a relevant item among their top `k`.
pub fn cmc_at_k(results: &[Ranking], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::contract("CMC rank must be at least 1"));
    }
    check_protocol(results)?;
    let hits = results
        .iter()
        .filter(|r| r.first_hit().is_some_and(|h| h <= k))
        .count();
    Ok(hits as f64 / results.len() as f64)
}

/// Average precision of one ranking: mean precision at each relevant rank.
pub fn average_precision(ranking: &Ranking) -> f64 {
    let total = ranking.num_relevant();
    if total == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, &rel) in ranking.relevant.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    sum / total as f64
}

pub fn mean_average_precision(results: &[Ranking]) -> Result<f64> {
    check_protocol(results)?;
    Ok(results.iter().map(average_precision).sum::<f64>() / results.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalMetrics {
    pub rank1: f64,
    pub rank5: f64,
    pub map: f64,
}

pub fn retrieval_metrics(results: &[Ranking]) -> Result<RetrievalMetrics> {
    Ok(RetrievalMetrics {
        rank1: cmc_at_k(results, 1)?,
        rank5: cmc_at_k(results, 5)?,
        map: mean_average_precision(results)?,
    })
}
