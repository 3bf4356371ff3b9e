//! End-to-end pipelines behind each CLI command. Every function is a pure
//! function of `(config, graph)`; all randomness flows from `config.seed`.

use ndarray::{Array2, Axis};
use rand::seq::index;
use serde::Serialize;

use crate::coldstart::{assign_cluster, cold_overlap, mrr_report};
use crate::config::{ExperimentConfig, ModelChoice};
use crate::error::{Result, SparcError};
use crate::eval::{hungarian_accuracy, intra_batch_edge_fraction, kmeans_with_rng, random_minibatches, spectral_minibatches};
use crate::gcn::{
    argmax, default_k_neighbors, infer_cold_start, infer_connected, plan_loss, train_sparc_gcn, train_sparc_gcn_on_plan,
    EigenContext, GcnConfig,
};
use crate::graph::{cold_start_split, ColdStartSplit, Graph};
use crate::laplacian::{
    feature_edge_adjacency, gaussian_affinity, k_power_adjacency, laplacian_from_affinity, sym_normalized_laplacian,
    LaplacianKind, LaplacianMatrix,
};
use crate::phormer::{
    build_token_list_eigenspace, build_token_list_features, build_token_list_hops, predict_classes, train_sparcphormer,
    TokenList, TokenPool, TokenProvenance,
};
use crate::rng::{streams, SeedStreams};
use crate::sparse::CsrMatrix;
use crate::spectral_map::{
    exact_spectral_embedding, mean_principal_angle_degrees, train_spectral_map, AffinitySpec, EmbeddingMatrix, MapTrace,
    SpectralMap,
};

/// Full-graph Laplacian for an affinity choice.
pub fn laplacian_for(g: &Graph, spec: &AffinitySpec) -> Result<LaplacianMatrix> {
    match spec {
        AffinitySpec::Adjacency => Ok(sym_normalized_laplacian(g)),
        AffinitySpec::KPower(k) => laplacian_from_affinity(&k_power_adjacency(g, *k)?, LaplacianKind::KPower),
        AffinitySpec::FeatureEdge { alpha, bandwidth } => {
            let w = gaussian_affinity(g.features().view(), *bandwidth)?;
            let a = feature_edge_adjacency(g, w.view(), *alpha)?;
            laplacian_from_affinity(&CsrMatrix::from_dense(a.view(), 0.0), LaplacianKind::FeatureEdge)
        }
    }
}

fn require_labels(g: &Graph) -> Result<(&[usize], usize)> {
    match (g.labels(), g.class_count()) {
        (Some(l), Some(c)) => Ok((l, c)),
        _ => Err(SparcError::Config("this command needs a labeled dataset".into())),
    }
}

/// `round(fraction · n)` uniformly chosen nodes marked as labeled.
pub fn label_mask(n: usize, fraction: f64, seeds: &SeedStreams) -> Vec<bool> {
    let take = ((fraction * n as f64).round() as usize).min(n);
    let mut rng = seeds.stream(streams::LABELS);
    let mut mask = vec![false; n];
    for i in index::sample(&mut rng, n, take) {
        mask[i] = true;
    }
    mask
}

fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return f64::NAN;
    }
    predicted.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbedSummary {
    pub dataset: String,
    pub seed: u64,
    pub nodes: usize,
    pub k: usize,
    pub laplacian: LaplacianKind,
    pub steps: usize,
    pub epochs: usize,
    pub final_epoch_loss: f64,
    pub max_ortho_deviation: f64,
    /// Against the exact bottom-`k` eigenvectors; absent above the oracle cap.
    pub mean_principal_angle_degrees: Option<f64>,
}

pub struct EmbedOutcome {
    pub summary: EmbedSummary,
    pub map: SpectralMap,
    pub embedding: EmbeddingMatrix,
    pub trace: MapTrace,
}

/// Trains the map on the whole graph and embeds every node.
pub fn run_embed(cfg: &ExperimentConfig, g: &Graph) -> Result<EmbedOutcome> {
    let seeds = SeedStreams::new(cfg.seed);
    let (map, trace) = train_spectral_map(g, &cfg.map, &seeds)?;
    let embedding = map.embed(g.features().view())?;
    let lap = laplacian_for(g, &cfg.map.affinity)?;
    let angle = match exact_spectral_embedding(&lap, cfg.map.k) {
        Ok(exact) => Some(mean_principal_angle_degrees(embedding.values.view(), exact.embedding.values.view())?),
        Err(SparcError::Capacity(_)) => None,
        Err(e) => return Err(e),
    };
    let summary = EmbedSummary {
        dataset: cfg.dataset_name.clone(),
        seed: cfg.seed,
        nodes: g.node_count(),
        k: cfg.map.k,
        laplacian: cfg.map.affinity.kind(),
        steps: trace.step_losses.len(),
        epochs: trace.epoch_losses.len(),
        final_epoch_loss: trace.epoch_losses.last().copied().unwrap_or(f64::NAN),
        max_ortho_deviation: trace.ortho_deviations.iter().copied().fold(0.0, f64::max),
        mean_principal_angle_degrees: angle,
    };
    Ok(EmbedOutcome {
        summary,
        map,
        embedding,
        trace,
    })
}

/// A cold split with a map trained on its training graph.
pub struct SplitMap {
    pub split: ColdStartSplit,
    pub map: SpectralMap,
    pub trace: MapTrace,
    /// One row per training node.
    pub train_embedding: Array2<f64>,
    /// One row per cold node.
    pub cold_embedding: Array2<f64>,
}

pub fn split_and_map(cfg: &ExperimentConfig, g: &Graph, cold_fraction: f64) -> Result<SplitMap> {
    let seeds = SeedStreams::new(cfg.seed);
    let split = cold_start_split(g, cold_fraction, cfg.seed)?;
    let (map, trace) = train_spectral_map(&split.train_graph, &cfg.map, &seeds)?;
    let train_embedding = map.embed(split.train_graph.features().view())?.values;
    let cold_embedding = map.embed(split.cold_features.view())?.values;
    Ok(SplitMap {
        split,
        map,
        trace,
        train_embedding,
        cold_embedding,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassifyReport {
    pub dataset: String,
    pub seed: u64,
    pub model: String,
    pub token_provenance: Option<&'static str>,
    pub cold_fraction: f64,
    pub label_fraction: f64,
    pub train_nodes: usize,
    pub labeled_nodes: usize,
    pub test_nodes: usize,
    pub cold_nodes: usize,
    pub k_neighbors: Option<usize>,
    /// Unlabeled training nodes, predicted with their graph neighborhoods.
    pub test_accuracy: f64,
    /// Held-out nodes, predicted from features alone.
    pub cold_accuracy: f64,
    pub gap: f64,
}

pub struct ClassifyOutcome {
    pub report: ClassifyReport,
    /// Per-step (SPARC-GCN) or per-epoch (SPARCphormer) training loss.
    pub model_losses: Vec<f64>,
    pub map_trace: Option<MapTrace>,
}

fn provenance_name(p: TokenProvenance) -> &'static str {
    match p {
        TokenProvenance::Hops => "hops",
        TokenProvenance::Eigenspace => "eigenspace",
        TokenProvenance::Features => "features",
    }
}

/// The configured classification run.
pub fn run_classify(cfg: &ExperimentConfig, g: &Graph) -> Result<ClassifyOutcome> {
    classify_with(cfg, g, cfg.cold_fraction, cfg.model, cfg.phormer.provenance)
}

/// Classification at an explicit cold fraction, model and token provenance.
pub fn classify_with(
    cfg: &ExperimentConfig,
    g: &Graph,
    cold_fraction: f64,
    model: ModelChoice,
    provenance: TokenProvenance,
) -> Result<ClassifyOutcome> {
    let (_, classes) = require_labels(g)?;
    let seeds = SeedStreams::new(cfg.seed);
    let needs_map = model == ModelChoice::SparcGcn || provenance != TokenProvenance::Features;
    let mapped = needs_map.then(|| split_and_map(cfg, g, cold_fraction)).transpose()?;
    let plain;
    let split = match &mapped {
        Some(sm) => &sm.split,
        None => {
            plain = cold_start_split(g, cold_fraction, cfg.seed)?;
            &plain
        }
    };
    let train_labels = split.train_graph.labels().expect("split keeps labels");
    let cold_labels = split.cold_labels.as_deref().expect("split keeps labels");
    let n_train = split.train_graph.node_count();
    let mask = label_mask(n_train, cfg.label_fraction, &seeds);
    let test_ids: Vec<usize> = (0..n_train).filter(|&i| !mask[i]).collect();
    let test_truth: Vec<usize> = test_ids.iter().map(|&i| train_labels[i]).collect();

    let (test_pred, cold_pred, losses, k_neighbors) = match model {
        ModelChoice::SparcGcn => {
            let sm = mapped.as_ref().expect("map trained");
            let k_neighbors = cfg.k_neighbors.unwrap_or_else(|| default_k_neighbors(&split.train_graph));
            let (test, cold, losses) = gcn_predictions(&cfg.gcn, sm, &mask, classes, &test_ids, k_neighbors, &seeds)?;
            (test, cold, losses, Some(k_neighbors))
        }
        ModelChoice::Sparcphormer => {
            let (train_lists, cold_lists) =
                token_lists(split, mapped.as_ref().map(|s| &s.map), mapped.as_ref().map(|s| &s.train_embedding), provenance, cfg.phormer.token_count)?;
            let labeled: Vec<usize> = (0..n_train).filter(|&i| mask[i]).collect();
            let lists: Vec<TokenList> = labeled.iter().map(|&i| train_lists[i].clone()).collect();
            let targets: Vec<usize> = labeled.iter().map(|&i| train_labels[i]).collect();
            let mut pc = cfg.phormer.clone();
            pc.provenance = provenance;
            let (head, trace) = train_sparcphormer(&lists, &targets, classes, &pc, &seeds)?;
            let test_lists: Vec<TokenList> = test_ids.iter().map(|&i| train_lists[i].clone()).collect();
            (
                predict_classes(&head, &test_lists)?,
                predict_classes(&head, &cold_lists)?,
                trace.epoch_losses,
                None,
            )
        }
    };
    let test_accuracy = accuracy(&test_pred, &test_truth);
    let cold_accuracy = accuracy(&cold_pred, cold_labels);
    let report = ClassifyReport {
        dataset: cfg.dataset_name.clone(),
        seed: cfg.seed,
        model: model.name().into(),
        token_provenance: (model == ModelChoice::Sparcphormer).then(|| provenance_name(provenance)),
        cold_fraction,
        label_fraction: cfg.label_fraction,
        train_nodes: n_train,
        labeled_nodes: n_train - test_ids.len(),
        test_nodes: test_ids.len(),
        cold_nodes: split.cold_ids.len(),
        k_neighbors,
        test_accuracy,
        cold_accuracy,
        gap: test_accuracy - cold_accuracy,
    };
    Ok(ClassifyOutcome {
        report,
        model_losses: losses,
        map_trace: mapped.map(|s| s.trace),
    })
}

type Predictions = (Vec<usize>, Vec<usize>, Vec<f64>);

fn gcn_predictions(
    config: &GcnConfig,
    sm: &SplitMap,
    mask: &[bool],
    classes: usize,
    test_ids: &[usize],
    k_neighbors: usize,
    seeds: &SeedStreams,
) -> Result<Predictions> {
    let g = &sm.split.train_graph;
    let labels = g.labels().expect("labeled");
    let masked: Vec<Option<usize>> = (0..g.node_count()).map(|i| mask[i].then_some(labels[i])).collect();
    let ctx = EigenContext {
        graph: g,
        embedding: sm.train_embedding.view(),
    };
    let (model, trace) = train_sparc_gcn(&ctx, &masked, classes, config, seeds)?;
    let test = test_ids
        .iter()
        .map(|&i| infer_connected(&model, &ctx, i).map(|l| argmax(l.view())))
        .collect::<Result<Vec<_>>>()?;
    let cold = sm
        .cold_embedding
        .axis_iter(Axis(0))
        .map(|u| infer_cold_start(&model, &ctx, u, k_neighbors).map(|l| argmax(l.view())))
        .collect::<Result<Vec<_>>>()?;
    Ok((test, cold, trace.step_losses))
}

/// Token lists for every training node (training id order) and every cold
/// node. Hop provenance applies to training nodes only; cold nodes have no
/// edges and always use eigenspace tokens.
pub fn token_lists(
    split: &ColdStartSplit,
    map: Option<&SpectralMap>,
    train_embedding: Option<&Array2<f64>>,
    provenance: TokenProvenance,
    t: usize,
) -> Result<(Vec<TokenList>, Vec<TokenList>)> {
    let g = &split.train_graph;
    let feats = g.features().view();
    let missing = || SparcError::State("eigenspace tokens need a trained map".into());
    let eigen = |node: usize, x: ndarray::ArrayView1<f64>| -> Result<TokenList> {
        let pool = TokenPool {
            features: feats,
            points: train_embedding.ok_or_else(missing)?.view(),
        };
        build_token_list_eigenspace(map.ok_or_else(missing)?, node, x, &pool, t)
    };
    let train = (0..g.node_count())
        .map(|i| {
            let node = split.train_ids[i];
            let mut list = match provenance {
                TokenProvenance::Eigenspace => eigen(node, g.feature_row(i))?,
                TokenProvenance::Hops => build_token_list_hops(g, i, t)?,
                TokenProvenance::Features => build_token_list_features(feats, node, g.feature_row(i), t)?,
            };
            list.node = node;
            Ok(list)
        })
        .collect::<Result<Vec<_>>>()?;
    let cold = split
        .cold_ids
        .iter()
        .zip(split.cold_features.axis_iter(Axis(0)))
        .map(|(&node, x)| match provenance {
            TokenProvenance::Features => build_token_list_features(feats, node, x, t),
            _ => eigen(node, x),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((train, cold))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterReport {
    pub dataset: String,
    pub seed: u64,
    pub clusters: usize,
    pub connected_accuracy: f64,
    pub cold_accuracy: f64,
    pub inertia: f64,
    pub lloyd_iterations: usize,
}

/// k-means on the training embedding; cold nodes go to their nearest
/// centroid. Each side is scored with its own Hungarian matching.
pub fn run_cluster(cfg: &ExperimentConfig, g: &Graph) -> Result<ClusterReport> {
    let (_, classes) = require_labels(g)?;
    let sm = split_and_map(cfg, g, cfg.cold_fraction)?;
    let c = cfg.clusters.unwrap_or(classes);
    let mut rng = SeedStreams::new(cfg.seed).stream(streams::KMEANS);
    let clustering = kmeans_with_rng(sm.train_embedding.view(), c, &mut rng)?;
    let train_labels = sm.split.train_graph.labels().expect("labeled");
    let connected_accuracy = hungarian_accuracy(&clustering.assignments, train_labels)?;
    let cold_assign = sm
        .cold_embedding
        .axis_iter(Axis(0))
        .map(|u| assign_cluster(u, clustering.centroids.view()))
        .collect::<Result<Vec<_>>>()?;
    let cold_accuracy = hungarian_accuracy(&cold_assign, sm.split.cold_labels.as_deref().expect("labeled"))?;
    Ok(ClusterReport {
        dataset: cfg.dataset_name.clone(),
        seed: cfg.seed,
        clusters: c,
        connected_accuracy,
        cold_accuracy,
        inertia: clustering.inertia,
        lloyd_iterations: clustering.inertia_history.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkpredReport {
    pub dataset: String,
    pub seed: u64,
    pub mrr: f64,
    pub mrr_x100: f64,
    pub evaluated: usize,
    pub excluded: usize,
    /// Degree-matched neighborhood overlap with the learned map.
    pub overlap_learned: Option<f64>,
    /// The same with raw features as coordinates.
    pub overlap_features: Option<f64>,
    /// The same with exact eigenvectors of the full graph, edges of cold
    /// nodes included; absent above the oracle cap.
    pub overlap_exact: Option<f64>,
}

pub fn run_linkpred(cfg: &ExperimentConfig, g: &Graph) -> Result<LinkpredReport> {
    let sm = split_and_map(cfg, g, cfg.cold_fraction)?;
    let split = &sm.split;
    let mrr = mrr_report(split, sm.train_embedding.view(), sm.cold_embedding.view())?;
    let overlap_learned = cold_overlap(split, sm.train_embedding.view(), sm.cold_embedding.view())?.mean();
    let overlap_features = cold_overlap(split, split.train_graph.features().view(), split.cold_features.view())?.mean();
    let overlap_exact = match exact_spectral_embedding(&laplacian_for(g, &cfg.map.affinity)?, cfg.map.k) {
        Ok(exact) => {
            let e = &exact.embedding.values;
            let pool = e.select(Axis(0), &split.train_ids);
            let queries = e.select(Axis(0), &split.cold_ids);
            cold_overlap(split, pool.view(), queries.view())?.mean()
        }
        Err(SparcError::Capacity(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(LinkpredReport {
        dataset: cfg.dataset_name.clone(),
        seed: cfg.seed,
        mrr: mrr.mrr,
        mrr_x100: mrr.mrr_x100,
        evaluated: mrr.evaluated,
        excluded: mrr.excluded,
        overlap_learned,
        overlap_features,
        overlap_exact,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchReport {
    pub dataset: String,
    pub seed: u64,
    pub minibatch_size: usize,
    pub steps: usize,
    pub spectral_edge_fraction: f64,
    pub random_edge_fraction: f64,
    pub edge_fraction_ratio: f64,
    /// Mean nll over every labeled node of the plan after the last step.
    pub spectral_final_loss: f64,
    pub random_final_loss: f64,
}

pub struct BatchOutcome {
    pub report: BatchReport,
    pub spectral_losses: Vec<f64>,
    pub random_losses: Vec<f64>,
}

/// Spectral against random minibatches: intra-batch edge fractions, and
/// SPARC-GCN trained for `minibatch_steps` steps on each plan.
pub fn run_batch(cfg: &ExperimentConfig, g: &Graph) -> Result<BatchOutcome> {
    let (labels, classes) = require_labels(g)?;
    let seeds = SeedStreams::new(cfg.seed);
    let (map, _) = train_spectral_map(g, &cfg.map, &seeds)?;
    let emb = map.embed(g.features().view())?.values;
    let kmeans_seed = cfg.seed;
    let spectral = spectral_minibatches(emb.view(), cfg.minibatch_size, kmeans_seed)?;
    let random = random_minibatches(g.node_count(), cfg.minibatch_size, cfg.seed)?;
    let spectral_edge_fraction = intra_batch_edge_fraction(&spectral, g)?;
    let random_edge_fraction = intra_batch_edge_fraction(&random, g)?;
    let mask = label_mask(g.node_count(), cfg.label_fraction, &seeds);
    let masked: Vec<Option<usize>> = (0..g.node_count()).map(|i| mask[i].then_some(labels[i])).collect();
    let ctx = EigenContext {
        graph: g,
        embedding: emb.view(),
    };
    let gcn = GcnConfig {
        steps: cfg.minibatch_steps,
        ..cfg.gcn.clone()
    };
    let (sm, st) = train_sparc_gcn_on_plan(&ctx, &masked, classes, &spectral, &gcn, &seeds)?;
    let (rm, rt) = train_sparc_gcn_on_plan(&ctx, &masked, classes, &random, &gcn, &seeds)?;
    let report = BatchReport {
        dataset: cfg.dataset_name.clone(),
        seed: cfg.seed,
        minibatch_size: cfg.minibatch_size,
        steps: cfg.minibatch_steps,
        spectral_edge_fraction,
        random_edge_fraction,
        edge_fraction_ratio: spectral_edge_fraction / random_edge_fraction,
        spectral_final_loss: plan_loss(&sm, &ctx, &masked, &spectral)?,
        random_final_loss: plan_loss(&rm, &ctx, &masked, &random)?,
    };
    Ok(BatchOutcome {
        report,
        spectral_losses: st.step_losses,
        random_losses: rt.step_losses,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub method: String,
    pub fraction: f64,
    pub test_accuracy: f64,
    pub cold_accuracy: f64,
}

/// The configured model, then the raw-feature token baseline, at every
/// fraction in `config.fractions`.
pub fn run_sweep(cfg: &ExperimentConfig, g: &Graph) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    let methods = [
        (cfg.model, cfg.phormer.provenance, cfg.model.name().to_string()),
        (ModelChoice::Sparcphormer, TokenProvenance::Features, "feature_tokens".to_string()),
    ];
    for (model, provenance, name) in methods {
        for &f in &cfg.fractions {
            let out = classify_with(cfg, g, f, model, provenance)?;
            rows.push(SweepRow {
                method: name.clone(),
                fraction: f,
                test_accuracy: out.report.test_accuracy,
                cold_accuracy: out.report.cold_accuracy,
            });
        }
    }
    Ok(rows)
}
