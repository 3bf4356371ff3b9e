//! Graph representation, dataset ingestion, and cold-start splitting.

use std::collections::{BTreeSet, VecDeque};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{domain_err, Result, SparcError};
use crate::rng::{streams, SeedStreams};
use crate::sparse::CsrMatrix;

/// Undirected attributed graph. The adjacency is binary, symmetric, and
/// carries a self-loop on every node.
#[derive(Debug, Clone)]
pub struct Graph {
    features: Array2<f64>,
    adjacency: CsrMatrix,
    labels: Option<Vec<usize>>,
    class_count: Option<usize>,
}

impl Graph {
    /// Builds a graph from undirected edges. Edges are symmetrized,
    /// de-duplicated, and self-loops are added on every node.
    pub fn from_edges(
        features: Array2<f64>,
        edges: impl IntoIterator<Item = (usize, usize)>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let n = features.nrows();
        let mut neighbors: Vec<BTreeSet<usize>> = (0..n).map(|i| BTreeSet::from([i])).collect();
        for (a, b) in edges {
            if a >= n || b >= n {
                return Err(SparcError::MalformedInput(format!(
                    "edge ({a}, {b}) references a node id >= n = {n}"
                )));
            }
            neighbors[a].insert(b);
            neighbors[b].insert(a);
        }
        let rows = neighbors
            .into_iter()
            .map(|s| s.into_iter().map(|j| (j, 1.0)).collect())
            .collect();
        let adjacency = CsrMatrix::from_rows(n, rows);
        Self::with_adjacency(features, adjacency, labels)
    }

    fn with_adjacency(
        features: Array2<f64>,
        adjacency: CsrMatrix,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let n = features.nrows();
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(SparcError::Dimension(format!(
                    "{} labels for {n} nodes",
                    l.len()
                )));
            }
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(SparcError::MalformedInput("non-finite feature value".into()));
        }
        let class_count = labels
            .as_ref()
            .map(|l| l.iter().copied().max().map_or(0, |m| m + 1));
        Ok(Self {
            features,
            adjacency,
            labels,
            class_count,
        })
    }

    pub fn node_count(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn feature_row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn adjacency(&self) -> &CsrMatrix {
        &self.adjacency
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn class_count(&self) -> Option<usize> {
        self.class_count
    }

    /// Neighbors of `i`, excluding the self-loop.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency
            .row_indices(i)
            .iter()
            .copied()
            .filter(move |&j| j != i)
    }

    /// Degree including the self-loop.
    pub fn degree(&self, i: usize) -> usize {
        self.adjacency.row_indices(i).len()
    }

    /// Undirected edges `(i, j)` with `i < j`; self-loops are not edges.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.node_count()).flat_map(move |i| {
            self.adjacency
                .row_indices(i)
                .iter()
                .copied()
                .filter(move |&j| j > i)
                .map(move |j| (i, j))
        })
    }

    pub fn edge_count(&self) -> usize {
        self.edges().count()
    }

    /// Mean number of neighbors per node, self-loops excluded.
    pub fn mean_degree(&self) -> f64 {
        2.0 * self.edge_count() as f64 / self.node_count().max(1) as f64
    }

    /// Hop distances from `source`; unreachable nodes are `None`.
    pub fn bfs_distances(&self, source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.node_count()];
        let mut queue = VecDeque::from([source]);
        dist[source] = Some(0);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap_or(0);
            for v in self.neighbors(u) {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Number of connected components.
    pub fn component_count(&self) -> usize {
        let n = self.node_count();
        let mut seen = vec![false; n];
        let mut count = 0;
        for s in 0..n {
            if seen[s] {
                continue;
            }
            count += 1;
            let mut stack = vec![s];
            seen[s] = true;
            while let Some(u) = stack.pop() {
                for v in self.neighbors(u) {
                    if !seen[v] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
        }
        count
    }

    /// Subgraph induced on `ids`, re-indexed to `0..ids.len()` in the given
    /// order.
    pub fn induced(&self, ids: &[usize]) -> Graph {
        let mut pos = vec![usize::MAX; self.node_count()];
        for (p, &id) in ids.iter().enumerate() {
            pos[id] = p;
        }
        let features = self.features.select(Axis(0), ids);
        let rows = ids
            .iter()
            .map(|&id| {
                let mut row: Vec<(usize, f64)> = self
                    .adjacency
                    .row_indices(id)
                    .iter()
                    .filter_map(|&j| (pos[j] != usize::MAX).then_some((pos[j], 1.0)))
                    .collect();
                row.sort_unstable_by_key(|e| e.0);
                row
            })
            .collect();
        let adjacency = CsrMatrix::from_rows(ids.len(), rows);
        let labels = self
            .labels
            .as_ref()
            .map(|l| ids.iter().map(|&i| l[i]).collect());
        let mut g = Graph::with_adjacency(features, adjacency, labels)
            .expect("induced subgraph of a valid graph is valid");
        g.class_count = self.class_count;
        g
    }

    /// Writes the edge / feature / label text trio.
    pub fn write_dataset(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut edges = BufWriter::new(fs::File::create(dir.join("edges.txt"))?);
        for (a, b) in self.edges() {
            writeln!(edges, "{a} {b}")?;
        }
        edges.flush()?;
        write_matrix(&dir.join("features.txt"), &self.features)?;
        if let Some(labels) = &self.labels {
            let mut out = BufWriter::new(fs::File::create(dir.join("labels.txt"))?);
            for l in labels {
                writeln!(out, "{l}")?;
            }
            out.flush()?;
        }
        Ok(())
    }
}

/// Loads a graph from the text trio: an edge file of whitespace-separated
/// integer pairs, a feature file with an `n d` header followed by `n` rows,
/// and an optional labels file with one integer per line.
pub fn load_dataset(
    edges_path: &Path,
    features_path: &Path,
    labels_path: Option<&Path>,
) -> Result<Graph> {
    let features = read_matrix(features_path)?;
    let n = features.nrows();
    let text = fs::read_to_string(edges_path)?;
    let mut edges = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(SparcError::MalformedInput(format!(
                "{}:{}: expected two node ids",
                edges_path.display(),
                lineno + 1
            )));
        };
        let parse = |s: &str| {
            s.parse::<usize>().map_err(|_| {
                SparcError::MalformedInput(format!(
                    "{}:{}: bad node id {s:?}",
                    edges_path.display(),
                    lineno + 1
                ))
            })
        };
        edges.push((parse(a)?, parse(b)?));
    }
    let labels = match labels_path {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            let labels = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(|l| {
                    l.parse::<usize>().map_err(|_| {
                        SparcError::MalformedInput(format!("{}: bad label {l:?}", p.display()))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if labels.len() != n {
                return Err(SparcError::Dimension(format!(
                    "{} has {} labels, feature file has {n} rows",
                    p.display(),
                    labels.len()
                )));
            }
            Some(labels)
        }
        None => None,
    };
    Graph::from_edges(features, edges, labels)
}

/// A graph read from the LINQS `.content` / `.cites` pair, plus the class
/// names indexed by label.
#[derive(Debug, Clone)]
pub struct LinqsImport {
    pub graph: Graph,
    pub class_names: Vec<String>,
    /// Original paper ids indexed by node id.
    pub paper_ids: Vec<String>,
    /// Citation lines naming a paper absent from the content file.
    pub dropped_citations: usize,
}

/// Parses LINQS citation data. Each content line is `paper_id`, the binary
/// word attributes, then the class name; each cites line is a pair of paper
/// ids. Nodes keep content-file order and classes are numbered in sorted
/// name order.
pub fn import_linqs(content: &str, cites: &str) -> Result<LinqsImport> {
    let mut paper_ids = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut class_of = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.is_empty() {
            continue;
        }
        if parts.len() < 3 {
            return Err(SparcError::MalformedInput(format!(
                "content line {}: need id, attributes and class",
                lineno + 1
            )));
        }
        let attrs = parts[1..parts.len() - 1]
            .iter()
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| SparcError::MalformedInput(format!("content line {}: bad attribute {v:?}", lineno + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != attrs.len() {
                return Err(SparcError::Dimension(format!(
                    "content line {} has {} attributes, expected {}",
                    lineno + 1,
                    attrs.len(),
                    first.len()
                )));
            }
        }
        paper_ids.push(parts[0].to_string());
        rows.push(attrs);
        class_of.push(parts[parts.len() - 1].to_string());
    }
    if rows.is_empty() {
        return Err(SparcError::MalformedInput("content file has no papers".into()));
    }
    let index: std::collections::HashMap<&str, usize> =
        paper_ids.iter().enumerate().map(|(i, p)| (p.as_str(), i)).collect();
    if index.len() != paper_ids.len() {
        return Err(SparcError::MalformedInput("content file repeats a paper id".into()));
    }
    let class_names: Vec<String> = class_of.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let labels = class_of
        .iter()
        .map(|c| class_names.binary_search(c).expect("collected above"))
        .collect();
    let mut edges = Vec::new();
    let mut dropped = 0;
    for (lineno, line) in cites.lines().enumerate() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            [] => continue,
            [a, b] => match (index.get(a), index.get(b)) {
                (Some(&i), Some(&j)) => edges.push((i, j)),
                _ => dropped += 1,
            },
            _ => {
                return Err(SparcError::MalformedInput(format!(
                    "cites line {}: expected two paper ids",
                    lineno + 1
                )))
            }
        }
    }
    let d = rows[0].len();
    let features = Array2::from_shape_vec((rows.len(), d), rows.into_iter().flatten().collect())
        .map_err(|e| SparcError::Dimension(e.to_string()))?;
    Ok(LinqsImport {
        graph: Graph::from_edges(features, edges, Some(labels))?,
        class_names,
        paper_ids,
        dropped_citations: dropped,
    })
}

/// Reads a dense matrix in the `n d` header text format.
pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| SparcError::MalformedInput(format!("{}: empty file", path.display())))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| SparcError::MalformedInput(format!("{}: bad header", path.display())))?;
    let [rows, cols] = dims[..] else {
        return Err(SparcError::MalformedInput(format!(
            "{}: header must be \"n d\"",
            path.display()
        )));
    };
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for line in lines {
        seen += 1;
        let before = data.len();
        for tok in line.split_whitespace() {
            data.push(tok.parse::<f64>().map_err(|_| {
                SparcError::MalformedInput(format!("{}: bad value {tok:?}", path.display()))
            })?);
        }
        if data.len() - before != cols {
            return Err(SparcError::Dimension(format!(
                "{}: row {seen} has {} values, expected {cols}",
                path.display(),
                data.len() - before
            )));
        }
    }
    if seen != rows {
        return Err(SparcError::Dimension(format!(
            "{}: header says {rows} rows, found {seen}",
            path.display()
        )));
    }
    Ok(Array2::from_shape_vec((rows, cols), data).expect("row count checked"))
}

/// Writes a dense matrix in the `n d` header text format.
pub fn write_matrix(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "{} {}", m.nrows(), m.ncols())?;
    for row in m.rows() {
        let mut first = true;
        for v in row {
            if !first {
                out.write_all(b" ")?;
            }
            first = false;
            // Shortest repr that round-trips.
            write!(out, "{v:?}")?;
        }
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Training graph plus the held-out cold-start nodes.
#[derive(Debug, Clone)]
pub struct ColdStartSplit {
    pub train_graph: Graph,
    /// Original id of each training node, indexed by training id.
    pub train_ids: Vec<usize>,
    /// Held-out original ids, ascending.
    pub cold_ids: Vec<usize>,
    pub cold_features: Array2<f64>,
    pub cold_labels: Option<Vec<usize>>,
    /// Original neighbor ids of each cold node (self excluded). Evaluation
    /// only.
    pub cold_truth_edges: Vec<Vec<usize>>,
    pub seed: u64,
    pub fraction: f64,
    original_to_train: Vec<Option<usize>>,
}

impl ColdStartSplit {
    /// Training id of an original node, if it was retained.
    pub fn train_index(&self, original: usize) -> Option<usize> {
        self.original_to_train.get(original).copied().flatten()
    }

    /// True neighbors of cold node `c` (position in `cold_ids`) that survive
    /// in the training graph, as training ids.
    pub fn truth_in_train(&self, c: usize) -> Vec<usize> {
        self.cold_truth_edges[c]
            .iter()
            .filter_map(|&o| self.train_index(o))
            .collect()
    }

    pub fn manifest(&self) -> SplitManifest {
        SplitManifest {
            cold_ids: self.cold_ids.clone(),
            seed: self.seed,
            fraction: self.fraction,
        }
    }
}

/// Serialized form of a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub cold_ids: Vec<usize>,
    pub seed: u64,
    pub fraction: f64,
}

/// Holds out `round(fraction · n)` uniformly chosen nodes.
pub fn cold_start_split(g: &Graph, fraction: f64, seed: u64) -> Result<ColdStartSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(domain_err!("cold fraction {fraction} must lie in (0, 1)"));
    }
    let n = g.node_count();
    let held = (fraction * n as f64).round() as usize;
    if held == 0 || held >= n {
        return Err(domain_err!(
            "cold fraction {fraction} on {n} nodes holds out {held} nodes"
        ));
    }
    let mut rng = SeedStreams::new(seed).stream(streams::SPLIT);
    let mut cold_ids = index::sample(&mut rng, n, held).into_vec();
    cold_ids.sort_unstable();
    split_with_cold_ids(g, cold_ids, seed, fraction)
}

/// Rebuilds a split from a manifest.
pub fn split_from_manifest(g: &Graph, manifest: &SplitManifest) -> Result<ColdStartSplit> {
    let mut ids = manifest.cold_ids.clone();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != manifest.cold_ids.len() || ids.last().is_some_and(|&m| m >= g.node_count()) {
        return Err(SparcError::MalformedInput(
            "manifest cold ids must be distinct node ids".into(),
        ));
    }
    split_with_cold_ids(g, ids, manifest.seed, manifest.fraction)
}

fn split_with_cold_ids(
    g: &Graph,
    cold_ids: Vec<usize>,
    seed: u64,
    fraction: f64,
) -> Result<ColdStartSplit> {
    let n = g.node_count();
    let mut is_cold = vec![false; n];
    for &c in &cold_ids {
        is_cold[c] = true;
    }
    let train_ids: Vec<usize> = (0..n).filter(|&i| !is_cold[i]).collect();
    if train_ids.is_empty() {
        return Err(domain_err!("split leaves an empty training graph"));
    }
    let mut original_to_train = vec![None; n];
    for (t, &o) in train_ids.iter().enumerate() {
        original_to_train[o] = Some(t);
    }
    let train_graph = g.induced(&train_ids);
    let cold_features = g.features().select(Axis(0), &cold_ids);
    let cold_labels = g.labels().map(|l| cold_ids.iter().map(|&c| l[c]).collect());
    let cold_truth_edges = cold_ids.iter().map(|&c| g.neighbors(c).collect()).collect();
    Ok(ColdStartSplit {
        train_graph,
        train_ids,
        cold_ids,
        cold_features,
        cold_labels,
        cold_truth_edges,
        seed,
        fraction,
        original_to_train,
    })
}

#[cfg(test)]
mod tests {
    use ndarray::Array2;

    use super::*;

    fn path_graph(n: usize) -> Graph {
        let features = Array2::from_shape_fn((n, 1), |(i, _)| i as f64);
        Graph::from_edges(features, (0..n - 1).map(|i| (i, i + 1)), None).unwrap()
    }

    #[test]
    fn symmetrizes_and_adds_self_loops() {
        let g = Graph::from_edges(Array2::zeros((2, 1)), [(0, 1)], None).unwrap();
        assert_eq!(g.adjacency().row_indices(0), &[0, 1]);
        assert_eq!(g.adjacency().row_indices(1), &[0, 1]);
        let dup = Graph::from_edges(Array2::zeros((2, 1)), [(0, 1), (0, 1), (1, 0)], None).unwrap();
        assert_eq!(dup.adjacency(), g.adjacency());
    }

    #[test]
    fn rejects_out_of_range_edge() {
        let err = Graph::from_edges(Array2::zeros((2, 1)), [(0, 2)], None).unwrap_err();
        assert!(matches!(err, SparcError::MalformedInput(_)));
    }

    #[test]
    fn bfs_on_path() {
        let g = path_graph(4);
        assert_eq!(g.bfs_distances(0), vec![Some(0), Some(1), Some(2), Some(3)]);
        assert_eq!(g.component_count(), 1);
        assert_eq!(g.edge_count(), 3);
    }

    #[test]
    fn split_moves_incident_edges_out() {
        let g = path_graph(30);
        let split = cold_start_split(&g, 0.1, 4).unwrap();
        assert_eq!(split.cold_ids.len(), 3);
        assert_eq!(split.train_graph.node_count(), 27);
        let again = cold_start_split(&g, 0.1, 4).unwrap();
        assert_eq!(split.cold_ids, again.cold_ids);
        let incident: BTreeSet<(usize, usize)> = g
            .edges()
            .filter(|&(a, b)| split.cold_ids.contains(&a) || split.cold_ids.contains(&b))
            .collect();
        assert_eq!(split.train_graph.edge_count() + incident.len(), g.edge_count());
    }

    #[test]
    fn split_rejects_degenerate_fractions() {
        let g = path_graph(10);
        assert!(cold_start_split(&g, 0.01, 0).is_err());
        assert!(cold_start_split(&g, 0.99, 0).is_err());
        assert!(cold_start_split(&g, 1.5, 0).is_err());
    }

    #[test]
    fn linqs_import_numbers_classes_and_drops_dangling_cites() {
        let content = "p9 1 0 1 Theory\np2 0 1 0 AI\np5 0 0 1 Theory\n";
        let cites = "p9 p2\np5 p9\np5 ghost\n";
        let imp = import_linqs(content, cites).unwrap();
        assert_eq!(imp.class_names, vec!["AI", "Theory"]);
        assert_eq!(imp.graph.labels().unwrap(), &[1, 0, 1]);
        assert_eq!(imp.graph.edges().collect::<Vec<_>>(), vec![(0, 1), (0, 2)]);
        assert_eq!(imp.dropped_citations, 1);
        assert_eq!(imp.graph.feature_row(0).to_vec(), vec![1.0, 0.0, 1.0]);
    }
}
