//! Clustering, Hungarian-matched accuracy and mini-batch planning.

use ndarray::{Array2, ArrayView2, Axis};
use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::coldstart::assign_cluster;
use crate::error::{domain_err, shape_err, Result, SparcError};
use crate::graph::Graph;
use crate::rng::{streams, Rng, SeedStreams};

/// Lloyd iteration cap.
pub const KMEANS_MAX_ITERATIONS: usize = 300;

/// Independent k-means++ starts; the lowest-inertia run is kept.
pub const KMEANS_RESTARTS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub centroids: Array2<f64>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
    pub converged: bool,
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn kmeans(points: ArrayView2<f64>, c: usize, seed: u64) -> Result<Clustering> {
    kmeans_with_rng(points, c, &mut SeedStreams::new(seed).stream(streams::KMEANS))
}

/// Best of [`KMEANS_RESTARTS`] runs of k-means++ seeding followed by Lloyd
/// iterations until the assignment stops changing. Empty clusters are
/// re-seeded at the point farthest from its centroid.
pub fn kmeans_with_rng(points: ArrayView2<f64>, c: usize, rng: &mut Rng) -> Result<Clustering> {
    let n = points.nrows();
    if c == 0 || c > n {
        return Err(domain_err!("{c} clusters for {n} points"));
    }
    let mut best = lloyd(points, c, rng)?;
    for _ in 1..KMEANS_RESTARTS {
        let run = lloyd(points, c, rng)?;
        if run.inertia < best.inertia {
            best = run;
        }
    }
    Ok(best)
}

fn lloyd(points: ArrayView2<f64>, c: usize, rng: &mut Rng) -> Result<Clustering> {
    let n = points.nrows();
    let mut centroids = plus_plus_seeds(points, c, rng);
    let mut assignments = vec![usize::MAX; n];
    let mut history: Vec<f64> = Vec::new();
    let mut converged = false;
    for _ in 0..KMEANS_MAX_ITERATIONS {
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, row) in points.axis_iter(Axis(0)).enumerate() {
            let a = assign_cluster(row, centroids.view())?;
            inertia += sq_dist(row, centroids.row(a));
            if a != assignments[i] {
                assignments[i] = a;
                changed = true;
            }
        }
        if let Some(&prev) = history.last() {
            if inertia > prev + 1e-9 * prev.max(1.0) {
                return Err(SparcError::Invariant(format!(
                    "k-means inertia rose from {prev} to {inertia}"
                )));
            }
        }
        history.push(inertia);
        if !changed {
            converged = true;
            break;
        }
        update_centroids(points, &mut assignments, &mut centroids);
    }
    let inertia = points
        .axis_iter(Axis(0))
        .zip(&assignments)
        .map(|(row, &a)| sq_dist(row, centroids.row(a)))
        .sum();
    Ok(Clustering {
        centroids,
        assignments,
        inertia,
        inertia_history: history,
        converged,
    })
}

fn plus_plus_seeds(points: ArrayView2<f64>, c: usize, rng: &mut Rng) -> Array2<f64> {
    let n = points.nrows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(chosen[0]))).collect();
    while chosen.len() < c {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            if d2[pick] == 0.0 {
                pick = d2.iter().position(|&w| w > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("c <= n")
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    points.select(Axis(0), &chosen)
}

fn update_centroids(points: ArrayView2<f64>, assignments: &mut [usize], centroids: &mut Array2<f64>) {
    let c = centroids.nrows();
    let mut sums = Array2::<f64>::zeros(centroids.dim());
    let mut counts = vec![0usize; c];
    for (row, &a) in points.axis_iter(Axis(0)).zip(assignments.iter()) {
        sums.row_mut(a).scaled_add(1.0, &row);
        counts[a] += 1;
    }
    for j in 0..c {
        if counts[j] > 0 {
            let mean = sums.row(j).mapv(|v| v / counts[j] as f64);
            centroids.row_mut(j).assign(&mean);
        }
    }
    for j in 0..c {
        if counts[j] > 0 {
            continue;
        }
        // Farthest point from its own centroid, taken from a cluster that can
        // spare it.
        let far = (0..points.nrows())
            .filter(|&i| counts[assignments[i]] > 1)
            .max_by(|&a, &b| {
                let da = sq_dist(points.row(a), centroids.row(assignments[a]));
                let db = sq_dist(points.row(b), centroids.row(assignments[b]));
                da.total_cmp(&db).then(b.cmp(&a))
            });
        if let Some(i) = far {
            counts[assignments[i]] -= 1;
            counts[j] = 1;
            assignments[i] = j;
            centroids.row_mut(j).assign(&points.row(i));
        }
    }
}

/// Fraction of nodes whose cluster maps to their class under the best
/// one-to-one cluster/class matching.
pub fn hungarian_accuracy(assignments: &[usize], labels: &[usize]) -> Result<f64> {
    if assignments.is_empty() {
        return Err(domain_err!("no assignments to score"));
    }
    if assignments.len() != labels.len() {
        return Err(shape_err!(
            "{} assignments for {} labels",
            assignments.len(),
            labels.len()
        ));
    }
    let size = assignments.iter().chain(labels).max().map_or(0, |m| m + 1);
    let mut agreement = vec![vec![0i64; size]; size];
    for (&a, &l) in assignments.iter().zip(labels) {
        agreement[a][l] += 1;
    }
    let weights = Matrix::from_rows(agreement).expect("square agreement matrix");
    let (matched, _) = kuhn_munkres(&weights);
    Ok(matched as f64 / assignments.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMethod {
    Random,
    Spectral,
}

/// A partition of the nodes into mini-batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub method: BatchMethod,
    pub batches: Vec<Vec<usize>>,
}

impl BatchPlan {
    /// Checks that the batches partition `0..n` with no empty batch.
    pub fn check_partition(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for b in &self.batches {
            if b.is_empty() {
                return Err(SparcError::Invariant("empty batch in plan".into()));
            }
            for &i in b {
                if i >= n || std::mem::replace(&mut seen[i], true) {
                    return Err(SparcError::Invariant(format!(
                        "node {i} is out of range or appears twice in the plan"
                    )));
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(SparcError::Invariant(format!("node {missing} is in no batch")));
        }
        Ok(())
    }
}

/// Uniform shuffle, then chunks of `m`.
pub fn random_minibatches(n: usize, m: usize, seed: u64) -> Result<BatchPlan> {
    if m == 0 || m > n {
        return Err(domain_err!("batch size {m} must lie in [1, {n}]"));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut SeedStreams::new(seed).stream(streams::BATCH));
    Ok(BatchPlan {
        method: BatchMethod::Random,
        batches: ids.chunks(m).map(<[usize]>::to_vec).collect(),
    })
}

/// k-means cells in the embedding, packed first-fit-decreasing into batches
/// of at most `m`. Cells larger than `m` are cut into pieces of `m` in order
/// of distance to their centroid.
pub fn spectral_minibatches(embeddings: ArrayView2<f64>, m: usize, seed: u64) -> Result<BatchPlan> {
    let n = embeddings.nrows();
    if m == 0 || m > n {
        return Err(domain_err!("batch size {m} must lie in [1, {n}]"));
    }
    let clustering = kmeans(embeddings, n.div_ceil(m), seed)?;
    let mut cells = vec![Vec::new(); clustering.centroids.nrows()];
    for (i, &a) in clustering.assignments.iter().enumerate() {
        cells[a].push(i);
    }
    let mut pieces = Vec::new();
    for (c, mut cell) in cells.into_iter().enumerate() {
        if cell.len() > m {
            let centroid = clustering.centroids.row(c);
            cell.sort_by(|&a, &b| {
                sq_dist(embeddings.row(a), centroid)
                    .total_cmp(&sq_dist(embeddings.row(b), centroid))
                    .then(a.cmp(&b))
            });
            pieces.extend(cell.chunks(m).map(<[usize]>::to_vec));
        } else if !cell.is_empty() {
            pieces.push(cell);
        }
    }
    pieces.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    let mut batches: Vec<Vec<usize>> = Vec::new();
    for piece in pieces {
        match batches.iter_mut().find(|b| b.len() + piece.len() <= m) {
            Some(b) => b.extend(piece),
            None => batches.push(piece),
        }
    }
    for b in &mut batches {
        b.sort_unstable();
    }
    Ok(BatchPlan {
        method: BatchMethod::Spectral,
        batches,
    })
}

/// Share of edges (self-loops excluded) whose endpoints fall in one batch.
pub fn intra_batch_edge_fraction(plan: &BatchPlan, g: &Graph) -> Result<f64> {
    let n = g.node_count();
    plan.check_partition(n)?;
    let mut batch_of = vec![0usize; n];
    for (b, ids) in plan.batches.iter().enumerate() {
        for &i in ids {
            batch_of[i] = b;
        }
    }
    let (mut inside, mut total) = (0usize, 0usize);
    for (i, j) in g.edges() {
        total += 1;
        if batch_of[i] == batch_of[j] {
            inside += 1;
        }
    }
    if total == 0 {
        return Err(domain_err!("graph has no edges"));
    }
    Ok(inside as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;
    use crate::synthetic::two_cliques;

    #[test]
    fn blobs_split_cleanly() {
        let p = array![[0.0, 0.0], [0.0, 1.0], [10.0, 10.0], [10.0, 11.0]];
        let c = kmeans(p.view(), 2, 0).unwrap();
        assert_eq!(c.assignments[0], c.assignments[1]);
        assert_eq!(c.assignments[2], c.assignments[3]);
        assert_ne!(c.assignments[0], c.assignments[2]);
        assert!((c.inertia - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_cluster_per_point() {
        let p = array![[0.0], [1.0], [5.0], [5.5]];
        assert_eq!(kmeans(p.view(), 4, 3).unwrap().inertia, 0.0);
        assert!(kmeans(p.view(), 5, 3).is_err());
    }

    #[test]
    fn hungarian_absorbs_permutation() {
        let labels = [0, 0, 1, 1, 2, 2];
        assert_eq!(hungarian_accuracy(&labels, &labels).unwrap(), 1.0);
        assert_eq!(hungarian_accuracy(&[2, 2, 0, 0, 1, 1], &labels).unwrap(), 1.0);
        assert!((hungarian_accuracy(&[0, 0, 0, 0, 0, 0], &labels).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(hungarian_accuracy(&[], &[]).is_err());
    }

    #[test]
    fn random_plan_chunks() {
        let p = random_minibatches(10, 3, 1).unwrap();
        assert_eq!(p.batches.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
        assert_eq!(random_minibatches(10, 10, 1).unwrap().batches.len(), 1);
        assert_eq!(p, random_minibatches(10, 3, 1).unwrap());
        p.check_partition(10).unwrap();
    }

    #[test]
    fn trivial_edge_fractions() {
        let g = two_cliques(4, 0).unwrap();
        let all = BatchPlan {
            method: BatchMethod::Random,
            batches: vec![(0..8).collect()],
        };
        assert_eq!(intra_batch_edge_fraction(&all, &g).unwrap(), 1.0);
        let single = BatchPlan {
            method: BatchMethod::Random,
            batches: (0..8).map(|i| vec![i]).collect(),
        };
        assert_eq!(intra_batch_edge_fraction(&single, &g).unwrap(), 0.0);
        let broken = BatchPlan {
            method: BatchMethod::Random,
            batches: vec![(0..7).collect()],
        };
        assert!(matches!(intra_batch_edge_fraction(&broken, &g), Err(SparcError::Invariant(_))));
    }
}
