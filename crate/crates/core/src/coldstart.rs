//! Nearest-neighbor inference for cold-start nodes and the metrics built on
//! it: neighborhood overlap, link-prediction MRR and cluster assignment.

use std::cmp::Ordering;
use std::collections::HashSet;

use ndarray::{ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Result};
use crate::graph::ColdStartSplit;
use crate::spectral_map::SpectralMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: usize,
    pub distance: f64,
}

fn by_distance_then_id(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.distance.total_cmp(&b.distance).then(a.id.cmp(&b.id))
}

fn euclidean(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Every pool row ranked by Euclidean distance to `query`, ties broken by
/// smaller id.
pub fn rank_all(pool: ArrayView2<f64>, query: ArrayView1<f64>) -> Result<Vec<Neighbor>> {
    if pool.nrows() == 0 {
        return Err(domain_err!("neighbor pool is empty"));
    }
    if pool.ncols() != query.len() {
        return Err(shape_err!(
            "query has {} coordinates, pool rows have {}",
            query.len(),
            pool.ncols()
        ));
    }
    let mut all: Vec<Neighbor> = pool
        .axis_iter(Axis(0))
        .enumerate()
        .map(|(id, row)| Neighbor {
            id,
            distance: euclidean(row, query),
        })
        .collect();
    all.sort_unstable_by(by_distance_then_id);
    Ok(all)
}

/// The `k` nearest pool rows, ascending by distance.
pub fn knn(pool: ArrayView2<f64>, query: ArrayView1<f64>, k: usize) -> Result<Vec<Neighbor>> {
    if k > pool.nrows() {
        return Err(domain_err!("k = {k} exceeds pool of {}", pool.nrows()));
    }
    let mut all = rank_all(pool, query)?;
    if k < all.len() && k > 0 {
        all.select_nth_unstable_by(k - 1, by_distance_then_id);
        all.truncate(k);
        all.sort_unstable_by(by_distance_then_id);
    } else {
        all.truncate(k);
    }
    Ok(all)
}

/// `|predicted ∩ truth| / |truth|`, or `None` when `truth` is empty.
pub fn neighborhood_overlap(predicted: &[usize], truth: &[usize]) -> Option<f64> {
    if truth.is_empty() {
        return None;
    }
    let truth: HashSet<usize> = truth.iter().copied().collect();
    let hits = predicted.iter().collect::<HashSet<_>>().into_iter().filter(|p| truth.contains(p)).count();
    Some(hits as f64 / truth.len() as f64)
}

/// Per-node scores over the cold set; `None` marks a skipped node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColdScores {
    pub cold_ids: Vec<usize>,
    pub per_node: Vec<Option<f64>>,
}

impl ColdScores {
    pub fn evaluated(&self) -> usize {
        self.per_node.iter().flatten().count()
    }

    pub fn skipped(&self) -> usize {
        self.per_node.len() - self.evaluated()
    }

    /// Mean over evaluated nodes; `None` when every node was skipped.
    pub fn mean(&self) -> Option<f64> {
        let n = self.evaluated();
        (n > 0).then(|| self.per_node.iter().flatten().sum::<f64>() / n as f64)
    }
}

fn check_cold_queries(split: &ColdStartSplit, pool: ArrayView2<f64>, queries: ArrayView2<f64>) -> Result<()> {
    if pool.nrows() != split.train_ids.len() {
        return Err(shape_err!(
            "pool has {} rows for {} training nodes",
            pool.nrows(),
            split.train_ids.len()
        ));
    }
    if queries.nrows() != split.cold_ids.len() {
        return Err(shape_err!(
            "{} query rows for {} cold nodes",
            queries.nrows(),
            split.cold_ids.len()
        ));
    }
    Ok(())
}

/// Degree-matched neighborhood overlap for each cold node. `pool` holds one
/// row per training node (train index order) and `queries` one row per cold
/// node (`split.cold_ids` order), in any common coordinate space. Each node's
/// `k` is the number of its true neighbors that remain in the training graph.
pub fn cold_overlap(split: &ColdStartSplit, pool: ArrayView2<f64>, queries: ArrayView2<f64>) -> Result<ColdScores> {
    check_cold_queries(split, pool, queries)?;
    let per_node = (0..split.cold_ids.len())
        .map(|c| {
            let truth = split.truth_in_train(c);
            if truth.is_empty() {
                return Ok(None);
            }
            let predicted: Vec<usize> = knn(pool, queries.row(c), truth.len())?
                .into_iter()
                .map(|n| n.id)
                .collect();
            Ok(neighborhood_overlap(&predicted, &truth))
        })
        .collect::<Result<_>>()?;
    Ok(ColdScores {
        cold_ids: split.cold_ids.clone(),
        per_node,
    })
}

/// Reciprocal rank of the best-ranked true neighbor, per cold node, ranking
/// the whole training pool. Nodes with no true neighbor left in the pool are
/// skipped.
pub fn cold_reciprocal_ranks(
    split: &ColdStartSplit,
    pool: ArrayView2<f64>,
    queries: ArrayView2<f64>,
) -> Result<ColdScores> {
    check_cold_queries(split, pool, queries)?;
    let per_node = (0..split.cold_ids.len())
        .map(|c| {
            let truth: HashSet<usize> = split.truth_in_train(c).into_iter().collect();
            if truth.is_empty() {
                return Ok(None);
            }
            let ranked = rank_all(pool, queries.row(c))?;
            let rank = ranked
                .iter()
                .position(|n| truth.contains(&n.id))
                .expect("truth ids lie in the pool");
            Ok(Some(1.0 / (rank + 1) as f64))
        })
        .collect::<Result<_>>()?;
    Ok(ColdScores {
        cold_ids: split.cold_ids.clone(),
        per_node,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrrReport {
    /// In `(0, 1]`.
    pub mrr: f64,
    pub mrr_x100: f64,
    pub evaluated: usize,
    pub excluded: usize,
    pub scores: ColdScores,
}

/// Link prediction for the cold set of `split` with a trained map.
pub fn link_predict_mrr(map: &SpectralMap, split: &ColdStartSplit) -> Result<MrrReport> {
    let pool = map.embed(split.train_graph.features().view())?;
    let queries = map.embed(split.cold_features.view())?;
    mrr_report(split, pool.values.view(), queries.values.view())
}

pub fn mrr_report(split: &ColdStartSplit, pool: ArrayView2<f64>, queries: ArrayView2<f64>) -> Result<MrrReport> {
    let scores = cold_reciprocal_ranks(split, pool, queries)?;
    let mrr = scores
        .mean()
        .ok_or_else(|| domain_err!("no cold node has a true neighbor in the training pool"))?;
    Ok(MrrReport {
        mrr,
        mrr_x100: mrr * 100.0,
        evaluated: scores.evaluated(),
        excluded: scores.skipped(),
        scores,
    })
}

/// Nearest centroid, ties to the smaller id.
pub fn assign_cluster(point: ArrayView1<f64>, centroids: ArrayView2<f64>) -> Result<usize> {
    if centroids.nrows() == 0 {
        return Err(domain_err!("no centroids"));
    }
    if centroids.ncols() != point.len() {
        return Err(shape_err!(
            "point has {} coordinates, centroids have {}",
            point.len(),
            centroids.ncols()
        ));
    }
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, row) in centroids.axis_iter(Axis(0)).enumerate() {
        let d: f64 = row.iter().zip(point.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    Ok(best)
}

/// One metric as emitted by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub dataset: String,
    pub seed: u64,
    pub value: f64,
    /// File holding per-node values, when written.
    pub per_node_values: Option<String>,
}
