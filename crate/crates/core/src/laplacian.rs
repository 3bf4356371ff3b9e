//! Graph Laplacians and the adjacency variants they can be built from.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Result, SparcError};
use crate::graph::Graph;
use crate::sparse::CsrMatrix;

/// Default node cap for the dense Gaussian affinity.
pub const AFFINITY_DENSE_CAP: usize = 20_000;
/// Rows used to estimate the median bandwidth on large inputs.
const MEDIAN_SAMPLE: usize = 2_000;

/// Resolves a dense cap, honouring the `SPARC_DENSE_CAP` override.
pub fn dense_cap(default: usize) -> usize {
    std::env::var("SPARC_DENSE_CAP")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(default)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaplacianKind {
    SymNormalized,
    KPower,
    FeatureEdge,
}

/// Gaussian kernel bandwidth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise Euclidean distance.
    Median,
}

#[derive(Debug, Clone)]
pub struct LaplacianMatrix {
    pub matrix: CsrMatrix,
    pub kind: LaplacianKind,
}

impl LaplacianMatrix {
    pub fn order(&self) -> usize {
        self.matrix.rows()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        self.matrix.to_dense()
    }
}

/// `D^{-1/2} A D^{-1/2}` with `D` the row sums of `a`.
pub fn normalized_adjacency(a: &CsrMatrix) -> CsrMatrix {
    let d = a.row_sums();
    let rows = (0..a.rows())
        .map(|i| {
            a.row(i)
                .map(|(j, v)| {
                    let dd = d[i] * d[j];
                    (j, if dd > 0.0 { v / dd.sqrt() } else { 0.0 })
                })
                .collect()
        })
        .collect();
    CsrMatrix::from_rows(a.cols(), rows)
}

/// `I - D^{-1/2} W D^{-1/2}` for any nonnegative symmetric affinity `w`.
pub fn laplacian_from_affinity(w: &CsrMatrix, kind: LaplacianKind) -> Result<LaplacianMatrix> {
    if w.rows() != w.cols() {
        return Err(shape_err!("affinity must be square"));
    }
    let norm = normalized_adjacency(w);
    let matrix = CsrMatrix::identity(w.rows()).add_scaled(1.0, &norm, -1.0)?;
    Ok(LaplacianMatrix { matrix, kind })
}

/// Dense counterpart of [`laplacian_from_affinity`] for batch-sized inputs.
pub fn dense_laplacian(w: ArrayView2<f64>) -> Array2<f64> {
    let m = w.nrows();
    let d: Array1<f64> = w.sum_axis(ndarray::Axis(1));
    let mut l = Array2::zeros((m, m));
    for i in 0..m {
        for j in 0..m {
            let dd = d[i] * d[j];
            let v = if dd > 0.0 { -w[[i, j]] / dd.sqrt() } else { 0.0 };
            l[[i, j]] = if i == j { 1.0 + v } else { v };
        }
    }
    l
}

/// `L = I - D^{-1/2} A D^{-1/2}` of the graph's adjacency.
pub fn sym_normalized_laplacian(g: &Graph) -> LaplacianMatrix {
    laplacian_from_affinity(g.adjacency(), LaplacianKind::SymNormalized)
        .expect("graph adjacency is square")
}

/// `Σ_{i=1..k} normalized(A^i)`, each power renormalized by its own row sums.
pub fn k_power_adjacency(g: &Graph, k: usize) -> Result<CsrMatrix> {
    if k == 0 {
        return Err(domain_err!("k-power requires k >= 1"));
    }
    let a = g.adjacency();
    let mut power = a.clone();
    let mut total = normalized_adjacency(&power);
    for _ in 1..k {
        power = power.matmul(a)?;
        total = total.add_scaled(1.0, &normalized_adjacency(&power), 1.0)?;
    }
    Ok(total)
}

/// Dense Gaussian affinity `exp(-‖x_i - x_j‖² / 2σ²)`.
pub fn gaussian_affinity(features: ArrayView2<f64>, bandwidth: Bandwidth) -> Result<Array2<f64>> {
    let n = features.nrows();
    let cap = dense_cap(AFFINITY_DENSE_CAP);
    if n > cap {
        return Err(SparcError::Capacity(format!(
            "dense affinity on {n} nodes exceeds cap {cap}"
        )));
    }
    let sigma = resolve_bandwidth(features, bandwidth)?;
    let sq = pairwise_sq_distances(features);
    let denom = 2.0 * sigma * sigma;
    Ok(sq.mapv(|d| (-d / denom).exp()))
}

/// σ for the kernel; the median rule samples rows on large inputs.
pub fn resolve_bandwidth(features: ArrayView2<f64>, bandwidth: Bandwidth) -> Result<f64> {
    match bandwidth {
        Bandwidth::Fixed(s) if s > 0.0 && s.is_finite() => Ok(s),
        Bandwidth::Fixed(s) => Err(domain_err!("bandwidth {s} must be positive")),
        Bandwidth::Median => {
            let n = features.nrows();
            let rows: Vec<usize> = if n <= MEDIAN_SAMPLE {
                (0..n).collect()
            } else {
                (0..MEDIAN_SAMPLE).map(|i| i * n / MEDIAN_SAMPLE).collect()
            };
            let sub = features.select(ndarray::Axis(0), &rows);
            let sq = pairwise_sq_distances(sub.view());
            let mut d: Vec<f64> = Vec::with_capacity(rows.len() * rows.len() / 2);
            for i in 0..rows.len() {
                for j in (i + 1)..rows.len() {
                    d.push(sq[[i, j]].sqrt());
                }
            }
            if d.is_empty() {
                return Err(domain_err!("median bandwidth needs at least two points"));
            }
            let mid = d.len() / 2;
            let (_, &mut median, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
            if median > 0.0 {
                Ok(median)
            } else {
                Err(domain_err!("median pairwise distance is zero"))
            }
        }
    }
}

/// Squared Euclidean distances between all rows; exact zeros on the diagonal.
pub fn pairwise_sq_distances(x: ArrayView2<f64>) -> Array2<f64> {
    let norms: Array1<f64> = x.rows().into_iter().map(|r| r.dot(&r)).collect();
    let gram = x.dot(&x.t());
    let n = x.nrows();
    Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            0.0
        } else {
            (norms[i] + norms[j] - 2.0 * gram[[i, j]]).max(0.0)
        }
    })
}

/// `α·W + (1-α)·A`.
pub fn feature_edge_adjacency(g: &Graph, w: ArrayView2<f64>, alpha: f64) -> Result<Array2<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(domain_err!("alpha {alpha} outside [0, 1]"));
    }
    let n = g.node_count();
    if w.dim() != (n, n) {
        return Err(shape_err!("affinity is {:?}, graph has {n} nodes", w.dim()));
    }
    let mut out = w.mapv(|v| alpha * v);
    for i in 0..n {
        for (j, v) in g.adjacency().row(i) {
            out[[i, j]] += (1.0 - alpha) * v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    #[test]
    fn two_node_laplacian() {
        let g = Graph::from_edges(Array2::zeros((2, 1)), [(0, 1)], None).unwrap();
        let l = sym_normalized_laplacian(&g).to_dense();
        assert_eq!(l, array![[0.5, -0.5], [-0.5, 0.5]]);
    }

    #[test]
    fn k_power_zero_rejected() {
        let g = Graph::from_edges(Array2::zeros((2, 1)), [(0, 1)], None).unwrap();
        assert!(matches!(k_power_adjacency(&g, 0), Err(SparcError::Domain(_))));
    }

    #[test]
    fn kernel_at_sigma_root_two() {
        let x = array![[0.0, 0.0], [2.0_f64.sqrt() * 0.7, 0.0]];
        let w = gaussian_affinity(x.view(), Bandwidth::Fixed(0.7)).unwrap();
        assert!((w[[0, 1]] - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(w[[0, 0]], 1.0);
        let same = gaussian_affinity(array![[1.0], [1.0]].view(), Bandwidth::Fixed(1.0)).unwrap();
        assert_eq!(same[[0, 1]], 1.0);
    }

    #[test]
    fn median_bandwidth() {
        // distances 1, 2, 3 -> median 2
        let x = array![[0.0], [1.0], [3.0]];
        let s = resolve_bandwidth(x.view(), Bandwidth::Median).unwrap();
        assert!((s - 2.0).abs() < 1e-12);
    }

    #[test]
    fn blend_endpoints() {
        let g = Graph::from_edges(Array2::zeros((2, 1)), [(0, 1)], None).unwrap();
        let w = array![[1.0, 0.2], [0.2, 1.0]];
        assert_eq!(feature_edge_adjacency(&g, w.view(), 0.0).unwrap(), g.adjacency().to_dense());
        assert_eq!(feature_edge_adjacency(&g, w.view(), 1.0).unwrap(), w);
        let half = feature_edge_adjacency(&g, w.view(), 0.5).unwrap();
        assert_eq!(half, array![[1.0, 0.6], [0.6, 1.0]]);
        assert!(feature_edge_adjacency(&g, w.view(), 1.5).is_err());
    }
}
