//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional; unknown or repeated keys are rejected. See the README for the
//! full schema.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Result, SparcError};
use crate::gcn::GcnConfig;
use crate::graph::{load_dataset, Graph};
use crate::laplacian::Bandwidth;
use crate::nn::{OptimizerConfig, OptimizerKind};
use crate::phormer::{PhormerConfig, TokenProvenance};
use crate::spectral_map::{AffinitySpec, SpectralMapConfig};
use crate::synthetic::{citation_like, manifold_graph, sbm, two_cliques, CitationConfig, ManifoldConfig, SbmConfig};

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    /// Text trio on disk.
    Files {
        edges: PathBuf,
        features: PathBuf,
        labels: Option<PathBuf>,
    },
    Synthetic { kind: SyntheticKind, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum SyntheticKind {
    TwoCliques { size: usize },
    Sbm(SbmConfig),
    Citation(CitationConfig),
    Manifold(ManifoldConfig),
}

impl DatasetSource {
    pub fn load(&self) -> Result<Graph> {
        match self {
            DatasetSource::Files { edges, features, labels } => load_dataset(edges, features, labels.as_deref()),
            DatasetSource::Synthetic { kind, seed } => match kind {
                SyntheticKind::TwoCliques { size } => two_cliques(*size, *seed),
                SyntheticKind::Sbm(c) => sbm(c, *seed),
                SyntheticKind::Citation(c) => citation_like(c, *seed),
                SyntheticKind::Manifold(c) => manifold_graph(c, *seed),
            },
        }
    }

    fn check_paths(&self) -> Result<()> {
        if let DatasetSource::Files { edges, features, labels } = self {
            for p in [Some(edges), Some(features), labels.as_ref()].into_iter().flatten() {
                if !p.is_file() {
                    return Err(SparcError::Config(format!("dataset file {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelChoice {
    SparcGcn,
    Sparcphormer,
}

impl ModelChoice {
    pub fn name(self) -> &'static str {
        match self {
            ModelChoice::SparcGcn => "sparc_gcn",
            ModelChoice::Sparcphormer => "sparcphormer",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub dataset_name: String,
    pub seed: u64,
    pub cold_fraction: f64,
    /// Fraction of training nodes whose labels are used for training; the
    /// rest are the connected test nodes.
    pub label_fraction: f64,
    pub map: SpectralMapConfig,
    pub model: ModelChoice,
    pub gcn: GcnConfig,
    /// Cold-start neighborhood size; `None` uses the mean training degree.
    pub k_neighbors: Option<usize>,
    pub phormer: PhormerConfig,
    /// Cluster count; `None` uses the class count.
    pub clusters: Option<usize>,
    pub minibatch_size: usize,
    pub minibatch_steps: usize,
    pub fractions: Vec<f64>,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::Synthetic {
                kind: SyntheticKind::Sbm(SbmConfig::two_block_fixture()),
                seed: 0,
            },
            dataset_name: "sbm".into(),
            seed: 0,
            cold_fraction: 0.03,
            label_fraction: 0.6,
            map: SpectralMapConfig::desk_defaults(),
            model: ModelChoice::SparcGcn,
            gcn: GcnConfig::desk_defaults(),
            k_neighbors: None,
            phormer: PhormerConfig::desk_defaults(),
            clusters: None,
            minibatch_size: 256,
            minibatch_steps: 100,
            fractions: vec![0.03, 0.1, 0.3],
            out: PathBuf::from("out"),
        }
    }
}

fn cfg_err(key: &str, value: &str, why: impl std::fmt::Display) -> SparcError {
    SparcError::Config(format!("{key} = {value}: {why}"))
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| cfg_err(key, value, e))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(cfg_err(key, value, "expected true or false")),
    }
}

fn auto_or<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if value == "auto" {
        Ok(None)
    } else {
        num(key, value).map(Some)
    }
}

/// Splits `text` into ordered key/value pairs.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(SparcError::Config(format!("line {}: expected key = value", lineno + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(SparcError::Config(format!("line {}: empty key", lineno + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(SparcError::Config(format!("line {}: key {k} repeated", lineno + 1)));
        }
    }
    Ok(out)
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| SparcError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses config text; relative dataset paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let mut c = ExperimentConfig::default();
        let get = |k: &str| pairs.get(k).map(String::as_str);
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };

        let synthetic_seed = get("synthetic_seed").map(|v| num("synthetic_seed", v)).transpose()?.unwrap_or(0);
        let synthetic_nodes = get("synthetic_nodes").map(|v| num::<usize>("synthetic_nodes", v)).transpose()?;
        match (get("dataset"), get("synthetic")) {
            (Some(_), Some(_)) => return Err(SparcError::Config("set either dataset or synthetic, not both".into())),
            (Some(dir), None) => {
                let dir = resolve(dir);
                c.dataset = DatasetSource::Files {
                    edges: dir.join("edges.txt"),
                    features: dir.join("features.txt"),
                    labels: Some(dir.join("labels.txt")),
                };
                c.dataset_name = dir
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "dataset".into());
            }
            (None, Some(name)) => {
                let kind = match name {
                    "two_cliques" => SyntheticKind::TwoCliques {
                        size: synthetic_nodes.map_or(20, |n| n / 2),
                    },
                    "sbm" => {
                        let mut s = SbmConfig::two_block_fixture();
                        if let Some(n) = synthetic_nodes {
                            s.n = n;
                        }
                        SyntheticKind::Sbm(s)
                    }
                    "citation" => {
                        let mut s = CitationConfig::small();
                        if let Some(n) = synthetic_nodes {
                            s.n = n;
                        }
                        SyntheticKind::Citation(s)
                    }
                    "manifold" => {
                        let mut s = ManifoldConfig::small();
                        if let Some(n) = synthetic_nodes {
                            s.n = n;
                        }
                        SyntheticKind::Manifold(s)
                    }
                    other => {
                        return Err(cfg_err("synthetic", other, "expected two_cliques, sbm, citation or manifold"));
                    }
                };
                c.dataset = DatasetSource::Synthetic {
                    kind,
                    seed: synthetic_seed,
                };
                c.dataset_name = name.to_string();
            }
            (None, None) => {}
        }
        if let Some(e) = get("edges") {
            let features = get("features").ok_or_else(|| SparcError::Config("edges given without features".into()))?;
            c.dataset = DatasetSource::Files {
                edges: resolve(e),
                features: resolve(features),
                labels: get("labels").map(resolve),
            };
        }
        if let Some(v) = get("dataset_name") {
            c.dataset_name = v.to_string();
        }

        for (key, value) in &pairs {
            let (key, v) = (key.as_str(), value.as_str());
            match key {
                "dataset" | "synthetic" | "synthetic_seed" | "synthetic_nodes" | "edges" | "features" | "labels"
                | "dataset_name" => {}
                "seed" => c.seed = num(key, v)?,
                "cold_fraction" => c.cold_fraction = num(key, v)?,
                "label_fraction" => c.label_fraction = num(key, v)?,
                "k" => c.map.k = num(key, v)?,
                "map_hidden" => c.map.hidden = list(key, v)?,
                "map_batch" => c.map.batch_size = num(key, v)?,
                "map_epochs" => c.map.epochs = num(key, v)?,
                "map_max_steps" => c.map.max_steps = auto_or(key, v)?,
                "map_optimizer" => c.map.optimizer = optimizer_kind(key, v, c.map.optimizer)?,
                "map_lr" => c.map.optimizer.learning_rate = num(key, v)?,
                "map_weight_decay" => c.map.optimizer.weight_decay = num(key, v)?,
                "plateau_tolerance" => c.map.plateau_tolerance = num(key, v)?,
                "plateau_window" => c.map.plateau_window = num(key, v)?,
                "project_gradient" => c.map.project_gradient = flag(key, v)?,
                "final_full_ortho" => c.map.final_full_ortho = flag(key, v)?,
                "laplacian" | "k_power" | "alpha" | "sigma" => {}
                "model" => {
                    c.model = match v {
                        "sparc_gcn" => ModelChoice::SparcGcn,
                        "sparcphormer" => ModelChoice::Sparcphormer,
                        _ => return Err(cfg_err(key, v, "expected sparc_gcn or sparcphormer")),
                    }
                }
                "gcn_hidden" => c.gcn.hidden = list(key, v)?,
                "gcn_batch" => c.gcn.batch_size = num(key, v)?,
                "gcn_steps" => c.gcn.steps = num(key, v)?,
                "gcn_optimizer" => c.gcn.optimizer = optimizer_kind(key, v, c.gcn.optimizer)?,
                "gcn_lr" => c.gcn.optimizer.learning_rate = num(key, v)?,
                "gcn_weight_decay" => c.gcn.optimizer.weight_decay = num(key, v)?,
                "gcn_retries" => c.gcn.max_retries = num(key, v)?,
                "k_neighbors" => c.k_neighbors = auto_or(key, v)?,
                "tokens" => c.phormer.token_count = num(key, v)?,
                "phormer_hidden" => c.phormer.hidden = num(key, v)?,
                "heads" => c.phormer.heads = num(key, v)?,
                "phormer_batch" => c.phormer.batch_size = num(key, v)?,
                "phormer_epochs" => c.phormer.epochs = num(key, v)?,
                "phormer_optimizer" => c.phormer.optimizer = optimizer_kind(key, v, c.phormer.optimizer)?,
                "phormer_lr" => c.phormer.optimizer.learning_rate = num(key, v)?,
                "phormer_weight_decay" => c.phormer.optimizer.weight_decay = num(key, v)?,
                "token_provenance" => {
                    c.phormer.provenance = match v {
                        "eigenspace" => TokenProvenance::Eigenspace,
                        "hops" => TokenProvenance::Hops,
                        "features" => TokenProvenance::Features,
                        _ => return Err(cfg_err(key, v, "expected eigenspace, hops or features")),
                    }
                }
                "clusters" => c.clusters = auto_or(key, v)?,
                "minibatch_size" => c.minibatch_size = num(key, v)?,
                "minibatch_steps" => c.minibatch_steps = num(key, v)?,
                "fractions" => c.fractions = list(key, v)?,
                "out" => c.out = PathBuf::from(v),
                _ => return Err(SparcError::Config(format!("unknown key {key}"))),
            }
        }
        c.map.affinity = affinity(get("laplacian"), get("k_power"), get("alpha"), get("sigma"))?;
        Ok(c)
    }

    /// Checks every value that does not depend on the dataset, plus that
    /// dataset files exist.
    pub fn validate(&self) -> Result<()> {
        let unit_open = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(SparcError::Config(format!("{name} = {v} must lie in (0, 1)")))
            }
        };
        unit_open("cold_fraction", self.cold_fraction)?;
        unit_open("label_fraction", self.label_fraction)?;
        for &f in &self.fractions {
            unit_open("fractions entry", f)?;
        }
        if self.map.k == 0 {
            return Err(SparcError::Config("k must be positive".into()));
        }
        if self.map.batch_size <= self.map.k {
            return Err(SparcError::Config(format!(
                "map_batch = {} must exceed k = {}",
                self.map.batch_size, self.map.k
            )));
        }
        if self.map.hidden.contains(&0) {
            return Err(SparcError::Config("map_hidden entries must be positive".into()));
        }
        if self.map.epochs == 0 && self.map.max_steps.is_none() {
            return Err(SparcError::Config("map_epochs must be positive".into()));
        }
        if !(self.map.plateau_tolerance >= 0.0) {
            return Err(SparcError::Config("plateau_tolerance must be nonnegative".into()));
        }
        for o in [&self.map.optimizer, &self.gcn.optimizer, &self.phormer.optimizer] {
            o.validate().map_err(|e| SparcError::Config(e.to_string()))?;
        }
        if let AffinitySpec::FeatureEdge { alpha, bandwidth } = self.map.affinity {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(SparcError::Config(format!("alpha = {alpha} must lie in [0, 1]")));
            }
            if let Bandwidth::Fixed(s) = bandwidth {
                if !(s > 0.0) {
                    return Err(SparcError::Config(format!("sigma = {s} must be positive")));
                }
            }
        }
        if matches!(self.map.affinity, AffinitySpec::KPower(0)) {
            return Err(SparcError::Config("k_power must be at least 1".into()));
        }
        if self.gcn.hidden.is_empty() || self.gcn.hidden.contains(&0) || self.gcn.batch_size == 0 {
            return Err(SparcError::Config("gcn_hidden and gcn_batch must be positive".into()));
        }
        if self.k_neighbors == Some(0) || self.clusters == Some(0) {
            return Err(SparcError::Config("k_neighbors and clusters must be positive".into()));
        }
        self.phormer.validate()?;
        if self.minibatch_size == 0 || self.minibatch_steps == 0 {
            return Err(SparcError::Config("minibatch_size and minibatch_steps must be positive".into()));
        }
        self.dataset.check_paths()
    }

    /// Checks the values that depend on the loaded graph, for a run that
    /// holds out `cold_fraction` of its nodes.
    pub fn validate_for_graph(&self, g: &Graph, cold_fraction: f64) -> Result<()> {
        let n = g.node_count();
        let held = (cold_fraction * n as f64).round() as usize;
        if held == 0 || held >= n {
            return Err(SparcError::Config(format!(
                "cold fraction {cold_fraction} holds out {held} of {n} nodes"
            )));
        }
        let train = n - held;
        self.map.validate(train)?;
        self.gcn.validate(train)?;
        if let Some(k) = self.k_neighbors {
            if k > train {
                return Err(SparcError::Config(format!("k_neighbors = {k} exceeds {train} training nodes")));
            }
        }
        if 1usize.checked_shl(self.phormer.token_count as u32).is_none_or(|p| p > train) {
            return Err(SparcError::Config(format!(
                "tokens = {} needs 2^{} training nodes, have {train}",
                self.phormer.token_count, self.phormer.token_count
            )));
        }
        let labeled = (self.label_fraction * train as f64).round() as usize;
        if labeled == 0 || labeled >= train {
            return Err(SparcError::Config(format!(
                "label_fraction {} labels {labeled} of {train} training nodes",
                self.label_fraction
            )));
        }
        if let Some(c) = self.clusters {
            if c > train {
                return Err(SparcError::Config(format!("clusters = {c} exceeds {train} training nodes")));
            }
        }
        if self.minibatch_size > n {
            return Err(SparcError::Config(format!("minibatch_size {} exceeds {n} nodes", self.minibatch_size)));
        }
        Ok(())
    }
}

fn optimizer_kind(key: &str, v: &str, current: OptimizerConfig) -> Result<OptimizerConfig> {
    let kind = match v {
        "adam" => OptimizerKind::Adam,
        "sgd" => OptimizerKind::Sgd,
        _ => return Err(cfg_err(key, v, "expected adam or sgd")),
    };
    Ok(OptimizerConfig { kind, ..current })
}

fn affinity(laplacian: Option<&str>, k_power: Option<&str>, alpha: Option<&str>, sigma: Option<&str>) -> Result<AffinitySpec> {
    match laplacian.unwrap_or("sym_normalized") {
        "sym_normalized" => Ok(AffinitySpec::Adjacency),
        "k_power" => Ok(AffinitySpec::KPower(k_power.map_or(Ok(2), |v| num("k_power", v))?)),
        "feature_edge" => {
            let alpha = alpha.map_or(Ok(0.5), |v| num("alpha", v))?;
            let bandwidth = match sigma.unwrap_or("median") {
                "median" => Bandwidth::Median,
                v => Bandwidth::Fixed(num("sigma", v)?),
            };
            Ok(AffinitySpec::FeatureEdge { alpha, bandwidth })
        }
        other => Err(cfg_err("laplacian", other, "expected sym_normalized, k_power or feature_edge")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_overrides() {
        let c = ExperimentConfig::parse(
            "# toy\nsynthetic = two_cliques\nsynthetic_nodes = 40\nk = 2\nmap_batch = 20\nmodel = sparcphormer\nfractions = 0.1, 0.2\nlaplacian = k_power\nk_power = 3\n",
            Path::new("."),
        )
        .unwrap();
        assert_eq!(c.map.k, 2);
        assert_eq!(c.model, ModelChoice::Sparcphormer);
        assert_eq!(c.fractions, vec![0.1, 0.2]);
        assert_eq!(c.map.affinity, AffinitySpec::KPower(3));
        assert_eq!(
            c.dataset,
            DatasetSource::Synthetic {
                kind: SyntheticKind::TwoCliques { size: 20 },
                seed: 0
            }
        );
    }

    #[test]
    fn rejects_unknown_and_repeated_keys() {
        assert!(matches!(ExperimentConfig::parse("colour = red", Path::new(".")), Err(SparcError::Config(_))));
        assert!(matches!(ExperimentConfig::parse("k = 2\nk = 3", Path::new(".")), Err(SparcError::Config(_))));
    }

    #[test]
    fn k_not_below_batch_is_rejected() {
        let c = ExperimentConfig::parse("k = 64\nmap_batch = 64", Path::new(".")).unwrap();
        assert!(matches!(c.validate(), Err(SparcError::Config(_))));
    }

    #[test]
    fn missing_dataset_files_are_rejected() {
        let c = ExperimentConfig::parse("dataset = /nonexistent/cora", Path::new(".")).unwrap();
        assert!(matches!(c.validate(), Err(SparcError::Config(_))));
    }
}
