//! Seeded synthetic graphs used as fixtures and as stand-ins for real data.

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{domain_err, Result};
use crate::graph::Graph;
use crate::rng::rng_from_seed;

/// Two disconnected cliques of `size` nodes each. Node `i` belongs to clique
/// `i / size`; its features are the clique's one-hot indicator in the first
/// two of four columns plus small per-node noise in the rest.
pub fn two_cliques(size: usize, seed: u64) -> Result<Graph> {
    if size < 2 {
        return Err(domain_err!("cliques need at least 2 nodes, got {size}"));
    }
    let n = 2 * size;
    let mut rng = rng_from_seed(seed);
    let noise = Normal::new(0.0, 0.05).expect("valid normal");
    let features = Array2::from_shape_fn((n, 4), |(i, j)| {
        let c = i / size;
        match j {
            0 | 1 => f64::from(u8::from(j == c)) + noise.sample(&mut rng),
            _ => noise.sample(&mut rng),
        }
    });
    let mut edges = Vec::new();
    for c in 0..2 {
        let base = c * size;
        for i in 0..size {
            for j in (i + 1)..size {
                edges.push((base + i, base + j));
            }
        }
    }
    let labels = (0..n).map(|i| i / size).collect();
    Graph::from_edges(features, edges, Some(labels))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SbmConfig {
    pub n: usize,
    pub blocks: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    /// Standard deviation of the per-node Gaussian noise added to the block
    /// mean. Block means are standard normal vectors.
    pub feature_noise: f64,
}

impl SbmConfig {
    /// The 2-block, 100-node fixture with `p_in = 0.3`, `p_out = 0.01`.
    pub fn two_block_fixture() -> Self {
        Self {
            n: 100,
            blocks: 2,
            p_in: 0.3,
            p_out: 0.01,
            feature_dim: 16,
            feature_noise: 0.5,
        }
    }
}

/// Stochastic block model with balanced contiguous blocks and Gaussian
/// block-mean features. Labels are block ids.
pub fn sbm(config: &SbmConfig, seed: u64) -> Result<Graph> {
    let SbmConfig {
        n,
        blocks,
        p_in,
        p_out,
        feature_dim,
        feature_noise,
    } = *config;
    if blocks == 0 || blocks > n {
        return Err(domain_err!("{blocks} blocks for {n} nodes"));
    }
    for p in [p_in, p_out] {
        if !(0.0..=1.0).contains(&p) {
            return Err(domain_err!("edge probability {p} outside [0, 1]"));
        }
    }
    if feature_dim == 0 || !(feature_noise >= 0.0) {
        return Err(domain_err!("feature_dim must be positive and noise nonnegative"));
    }
    let mut rng = rng_from_seed(seed);
    let labels: Vec<usize> = (0..n).map(|i| i * blocks / n).collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if labels[i] == labels[j] { p_in } else { p_out };
            if rng.random_bool(p) {
                edges.push((i, j));
            }
        }
    }
    let std = Normal::new(0.0, 1.0).expect("valid normal");
    let means = Array2::from_shape_fn((blocks, feature_dim), |_| std.sample(&mut rng));
    let features = Array2::from_shape_fn((n, feature_dim), |(i, j)| {
        means[[labels[i], j]] + feature_noise * std.sample(&mut rng)
    });
    Graph::from_edges(features, edges, Some(labels))
}

/// Sparse, homophilous graph with bag-of-words features, shaped like a small
/// citation network.
#[derive(Debug, Clone, PartialEq)]
pub struct CitationConfig {
    pub n: usize,
    pub classes: usize,
    pub mean_degree: f64,
    /// Probability an edge stays within its class.
    pub homophily: f64,
    pub vocabulary: usize,
    pub words_per_node: usize,
    /// Probability a word is drawn from the node's class topic.
    pub topic_strength: f64,
}

impl CitationConfig {
    pub fn small() -> Self {
        Self {
            n: 600,
            classes: 5,
            mean_degree: 4.0,
            homophily: 0.85,
            vocabulary: 300,
            words_per_node: 18,
            topic_strength: 0.35,
        }
    }
}

pub fn citation_like(config: &CitationConfig, seed: u64) -> Result<Graph> {
    let c = config;
    if c.classes == 0 || c.classes > c.n || c.vocabulary < c.classes {
        return Err(domain_err!(
            "{} classes, {} nodes, {} words is not a valid layout",
            c.classes,
            c.n,
            c.vocabulary
        ));
    }
    if !(0.0..=1.0).contains(&c.homophily) || !(0.0..=1.0).contains(&c.topic_strength) {
        return Err(domain_err!("probabilities must lie in [0, 1]"));
    }
    let mut rng = rng_from_seed(seed);
    let labels: Vec<usize> = (0..c.n).map(|_| rng.random_range(0..c.classes)).collect();
    let mut members = vec![Vec::new(); c.classes];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    let target = (c.n as f64 * c.mean_degree / 2.0).round() as usize;
    let mut edges = Vec::with_capacity(target);
    let mut attempts = 0;
    while edges.len() < target && attempts < target * 20 {
        attempts += 1;
        let u = rng.random_range(0..c.n);
        let v = if rng.random_bool(c.homophily) {
            let pool = &members[labels[u]];
            pool[rng.random_range(0..pool.len())]
        } else {
            rng.random_range(0..c.n)
        };
        if u != v {
            edges.push((u.min(v), u.max(v)));
        }
    }
    let topic = c.vocabulary / c.classes;
    let mut features = Array2::zeros((c.n, c.vocabulary));
    for (i, &l) in labels.iter().enumerate() {
        for _ in 0..c.words_per_node {
            let w = if rng.random_bool(c.topic_strength) {
                l * topic + rng.random_range(0..topic)
            } else {
                rng.random_range(0..c.vocabulary)
            };
            features[[i, w]] = 1.0;
        }
    }
    Graph::from_edges(features, edges, Some(labels))
}

/// Nodes at latent positions drawn from a Gaussian mixture, linked to their
/// nearest latent neighbors. Features are a random cosine encoding of the
/// position followed by pure-noise columns, so only part of the feature
/// vector carries geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldConfig {
    pub n: usize,
    pub classes: usize,
    pub latent_dim: usize,
    /// Standard deviation of each class blob around its center in `[0, 1]^latent_dim`.
    pub spread: f64,
    /// Each node links to this many nearest latent neighbors.
    pub neighbors: usize,
    pub informative: usize,
    /// Frequency scale of the cosine encoding.
    pub frequency: f64,
    pub noise_dims: usize,
    pub noise_std: f64,
}

impl ManifoldConfig {
    pub fn small() -> Self {
        Self {
            n: 800,
            classes: 5,
            latent_dim: 2,
            spread: 0.12,
            neighbors: 4,
            informative: 48,
            frequency: 4.0,
            noise_dims: 160,
            noise_std: 0.6,
        }
    }
}

pub fn manifold_graph(config: &ManifoldConfig, seed: u64) -> Result<Graph> {
    let c = config;
    if c.classes == 0 || c.classes > c.n || c.latent_dim == 0 || c.informative == 0 {
        return Err(domain_err!("manifold graph needs positive classes, latent and informative dims"));
    }
    if c.neighbors == 0 || c.neighbors >= c.n {
        return Err(domain_err!("{} neighbors for {} nodes", c.neighbors, c.n));
    }
    if !(c.spread >= 0.0 && c.noise_std >= 0.0 && c.frequency > 0.0) {
        return Err(domain_err!("spread, noise and frequency must be nonnegative"));
    }
    let mut rng = rng_from_seed(seed);
    let std = Normal::new(0.0, 1.0).expect("valid normal");
    let centers = Array2::from_shape_fn((c.classes, c.latent_dim), |_| rng.random_range(0.0..1.0));
    let labels: Vec<usize> = (0..c.n).map(|i| i % c.classes).collect();
    let z = Array2::from_shape_fn((c.n, c.latent_dim), |(i, j)| centers[[labels[i], j]] + c.spread * std.sample(&mut rng));
    let proj = Array2::from_shape_fn((c.latent_dim, c.informative), |_| c.frequency * std.sample(&mut rng));
    let phase: Vec<f64> = (0..c.informative).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    let enc = z.dot(&proj);
    let d = c.informative + c.noise_dims;
    let features = Array2::from_shape_fn((c.n, d), |(i, j)| {
        if j < c.informative {
            (enc[[i, j]] + phase[j]).cos()
        } else {
            c.noise_std * std.sample(&mut rng)
        }
    });
    let mut edges = Vec::with_capacity(c.n * c.neighbors);
    for i in 0..c.n {
        let mut dist: Vec<(f64, usize)> = (0..c.n)
            .filter(|&j| j != i)
            .map(|j| {
                let d2: f64 = z.row(i).iter().zip(z.row(j).iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                (d2, j)
            })
            .collect();
        dist.select_nth_unstable_by(c.neighbors - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        edges.extend(dist[..c.neighbors].iter().map(|&(_, j)| (i, j)));
    }
    Graph::from_edges(features, edges, Some(labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cliques_are_disconnected() {
        let g = two_cliques(20, 0).unwrap();
        assert_eq!(g.node_count(), 40);
        assert_eq!(g.component_count(), 2);
        assert_eq!(g.edge_count(), 2 * 190);
    }

    #[test]
    fn sbm_is_seeded() {
        let c = SbmConfig::two_block_fixture();
        let a = sbm(&c, 3).unwrap();
        let b = sbm(&c, 3).unwrap();
        assert_eq!(a.features(), b.features());
        assert_eq!(a.edges().collect::<Vec<_>>(), b.edges().collect::<Vec<_>>());
        let within = a
            .edges()
            .filter(|&(i, j)| a.labels().unwrap()[i] == a.labels().unwrap()[j])
            .count();
        assert!(within * 5 > a.edge_count() * 4);
    }

    #[test]
    fn manifold_graph_links_latent_neighbors() {
        let g = manifold_graph(&ManifoldConfig::small(), 2).unwrap();
        assert_eq!(g.node_count(), 800);
        assert_eq!(g.feature_dim(), 208);
        assert!(g.mean_degree() >= 4.0);
        let l = g.labels().unwrap();
        let within = g.edges().filter(|&(i, j)| l[i] == l[j]).count();
        assert!(within * 10 > g.edge_count() * 7);
    }

    #[test]
    fn citation_graph_shape() {
        let g = citation_like(&CitationConfig::small(), 1).unwrap();
        assert_eq!(g.feature_dim(), 300);
        assert!(g.mean_degree() > 2.5);
    }
}
