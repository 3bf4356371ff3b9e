//! Learned map from node features into the Laplacian eigenspace.
//!
//! The map is a dense body followed by a linear orthogonalization layer. The
//! orthogonalization weights are reset from the Cholesky factor of the batch
//! Gram matrix so that outputs satisfy `YᵀY = m·I` on that batch; gradient
//! steps on the Rayleigh-quotient loss then tune the body with those weights
//! frozen. The loss is divided by `m` so its value is comparable to the sum
//! of the `k` smallest Laplacian eigenvalues.

use std::collections::VecDeque;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::{shape_err, Result, SparcError};
use crate::graph::Graph;
use crate::laplacian::{
    dense_cap, dense_laplacian, gaussian_affinity, k_power_adjacency, resolve_bandwidth, Bandwidth,
    LaplacianKind, LaplacianMatrix,
};
use crate::linalg;
use crate::nn::{Activation, DenseNet, Optimizer, OptimizerConfig};
use crate::rng::{streams, Rng, SeedStreams};
use crate::sparse::CsrMatrix;

const MAP_MAGIC: &[u8; 8] = b"SPRCMAP1";
/// Default node cap for the dense eigen-oracle.
pub const ORACLE_DENSE_CAP: usize = 5_000;
/// Tolerance on `(1/m)YᵀY - I` accepted after an orthogonalization step.
pub const WHITENING_TOLERANCE: f64 = 1e-6;
const JITTER_SCHEDULE: [f64; 6] = [0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

/// How the orthogonalization layer scales its outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `YᵀY = m·I` on the orthogonalization batch.
    SqrtBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    Learned,
    ExactOracle,
}

/// `n × k` eigenspace coordinates, one column per eigenfunction.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub values: Array2<f64>,
    pub source: EmbeddingSource,
}

impl EmbeddingMatrix {
    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    /// Writes the `n k` header text format.
    pub fn write_text(&self, path: &Path) -> Result<()> {
        crate::graph::write_matrix(path, &self.values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralMap {
    body: DenseNet,
    ortho_weights: Array2<f64>,
    normalization: Normalization,
}

/// Outcome of one orthogonalization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrthoReport {
    /// Max-entry deviation of `(1/m)YᵀY` from the identity on the batch.
    pub deviation: f64,
    /// Relative jitter that was needed (0 when none).
    pub jitter: f64,
}

impl SpectralMap {
    /// Body `input_dim → hidden… → k` with ReLU hidden layers and a linear
    /// output, followed by an identity orthogonalization layer.
    pub fn new(input_dim: usize, hidden: &[usize], k: usize, rng: &mut Rng) -> Result<Self> {
        if k == 0 {
            return Err(shape_err!("embedding dimension must be positive"));
        }
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(hidden);
        dims.push(k);
        let body = DenseNet::new(&dims, Activation::Relu, Activation::Identity, rng)?;
        Ok(Self {
            body,
            ortho_weights: Array2::eye(k),
            normalization: Normalization::SqrtBatch,
        })
    }

    pub fn from_parts(body: DenseNet, ortho_weights: Array2<f64>) -> Result<Self> {
        let k = body.output_dim();
        if ortho_weights.dim() != (k, k) {
            return Err(shape_err!("ortho weights {:?} for k = {k}", ortho_weights.dim()));
        }
        Ok(Self {
            body,
            ortho_weights,
            normalization: Normalization::SqrtBatch,
        })
    }

    pub fn k(&self) -> usize {
        self.ortho_weights.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.body.input_dim()
    }

    pub fn body(&self) -> &DenseNet {
        &self.body
    }

    pub fn body_mut(&mut self) -> &mut DenseNet {
        &mut self.body
    }

    pub fn ortho_weights(&self) -> &Array2<f64> {
        &self.ortho_weights
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    /// Maps feature rows into the eigenspace. Needs no adjacency.
    pub fn embed(&self, features: ArrayView2<f64>) -> Result<EmbeddingMatrix> {
        let raw = self.body.predict(features)?;
        Ok(EmbeddingMatrix {
            values: raw.dot(&self.ortho_weights),
            source: EmbeddingSource::Learned,
        })
    }

    /// Resets the orthogonalization layer from this batch:
    /// `ortho = √m (L⁻¹)ᵀ` with `L Lᵀ = ŶᵀŶ`.
    pub fn ortho_step(&mut self, batch: ArrayView2<f64>) -> Result<OrthoReport> {
        let raw = self.body.predict(batch)?;
        let (weights, report) = orthogonalizer(raw.view())?;
        self.ortho_weights = weights;
        Ok(report)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        codec::write_magic(w, MAP_MAGIC)?;
        codec::write_u32(w, codec::dim_u32(self.k())?)?;
        codec::write_u8(w, 0)?;
        self.body.write_to(w)?;
        codec::write_matrix(w, &self.ortho_weights)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        codec::read_magic(r, MAP_MAGIC)?;
        let k = codec::read_u32(r)? as usize;
        let tag = codec::read_u8(r)?;
        if tag != 0 {
            return Err(SparcError::MalformedInput(format!("unknown normalization tag {tag}")));
        }
        let body = DenseNet::read_from(r)?;
        if body.output_dim() != k {
            return Err(SparcError::MalformedInput(format!(
                "map body outputs {} but header says k = {k}",
                body.output_dim()
            )));
        }
        let ortho = codec::read_matrix(r, k, k)?;
        Self::from_parts(body, ortho)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(fs::File::open(path)?))
    }
}

/// Whitening weights for raw outputs `Ŷ` (`m × k`).
pub fn orthogonalizer(raw: ArrayView2<f64>) -> Result<(Array2<f64>, OrthoReport)> {
    let (m, k) = raw.dim();
    if m < k {
        return Err(SparcError::DegenerateBatch(format!(
            "batch of {m} rows cannot whiten {k} columns"
        )));
    }
    let gram = raw.t().dot(&raw);
    let scale = (gram.diag().sum() / k as f64).max(f64::MIN_POSITIVE);
    let sqrt_m = (m as f64).sqrt();
    let mut best_deviation = f64::INFINITY;
    for &jitter in &JITTER_SCHEDULE {
        let mut g = gram.clone();
        for i in 0..k {
            g[[i, i]] += jitter * scale;
        }
        let Some(l) = linalg::cholesky(g.view()) else {
            continue;
        };
        let weights = linalg::lower_triangular_inverse(l.view()).t().mapv(|v| v * sqrt_m);
        let y = raw.dot(&weights);
        let deviation = linalg::max_identity_deviation((y.t().dot(&y) / m as f64).view());
        if deviation <= WHITENING_TOLERANCE {
            return Ok((weights, OrthoReport { deviation, jitter }));
        }
        best_deviation = best_deviation.min(deviation);
    }
    Err(SparcError::DegenerateBatch(format!(
        "Gram matrix of the batch outputs is rank deficient; best whitening deviation {best_deviation:e} after jitter up to 1e-4"
    )))
}

/// `trace(YᵀLY)/m` and its gradient `(L + Lᵀ)Y/m`.
pub fn rayleigh_loss(y: ArrayView2<f64>, laplacian: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    let m = y.nrows();
    if laplacian.dim() != (m, m) {
        return Err(shape_err!(
            "outputs have {m} rows but the sub-Laplacian is {:?}",
            laplacian.dim()
        ));
    }
    let ly = laplacian.dot(&y);
    let loss = (&y * &ly).sum() / m as f64;
    let lty = laplacian.t().dot(&y);
    let grad = (ly + lty) / m as f64;
    Ok((loss, grad))
}

/// Removes from `grad` its component inside the column span of `y`:
/// `grad - Y (YᵀY)⁻¹ Yᵀ grad`. What remains is tangent to the constraint
/// surface `YᵀY = const`, so a step cannot simply shrink the outputs.
pub fn tangent_projection(y: ArrayView2<f64>, grad: ArrayView2<f64>) -> Result<Array2<f64>> {
    if y.dim() != grad.dim() {
        return Err(shape_err!("outputs {:?} but gradient {:?}", y.dim(), grad.dim()));
    }
    let gram = y.t().dot(&y);
    let l = linalg::cholesky(gram.view()).ok_or_else(|| {
        SparcError::DegenerateBatch("outputs are rank deficient on the gradient batch".into())
    })?;
    let li = linalg::lower_triangular_inverse(l.view());
    let gram_inv = li.t().dot(&li);
    Ok(&grad - &y.dot(&gram_inv.dot(&y.t().dot(&grad))))
}

/// Affinity the batch sub-Laplacians are built from.
#[derive(Debug, Clone, PartialEq)]
pub enum AffinitySpec {
    /// The graph adjacency itself.
    Adjacency,
    /// Sum of the first `k` normalized adjacency powers.
    KPower(usize),
    /// `α·W + (1-α)·A` with a Gaussian feature kernel.
    FeatureEdge { alpha: f64, bandwidth: Bandwidth },
}

impl AffinitySpec {
    pub fn kind(&self) -> LaplacianKind {
        match self {
            AffinitySpec::Adjacency => LaplacianKind::SymNormalized,
            AffinitySpec::KPower(_) => LaplacianKind::KPower,
            AffinitySpec::FeatureEdge { .. } => LaplacianKind::FeatureEdge,
        }
    }
}

/// Resolved affinity source, with any graph-wide precomputation done.
#[derive(Debug, Clone)]
pub enum BatchAffinity {
    Adjacency,
    KPower(CsrMatrix),
    FeatureEdge { alpha: f64, sigma: f64 },
}

impl BatchAffinity {
    pub fn prepare(g: &Graph, spec: &AffinitySpec) -> Result<Self> {
        match spec {
            AffinitySpec::Adjacency => Ok(BatchAffinity::Adjacency),
            AffinitySpec::KPower(k) => Ok(BatchAffinity::KPower(k_power_adjacency(g, *k)?)),
            AffinitySpec::FeatureEdge { alpha, bandwidth } => {
                if !(0.0..=1.0).contains(alpha) {
                    return Err(crate::error::domain_err!("alpha {alpha} outside [0, 1]"));
                }
                let sigma = resolve_bandwidth(g.features().view(), *bandwidth)?;
                Ok(BatchAffinity::FeatureEdge {
                    alpha: *alpha,
                    sigma,
                })
            }
        }
    }

    /// Dense affinity restricted to `ids`.
    pub fn submatrix(&self, g: &Graph, ids: &[usize]) -> Result<Array2<f64>> {
        Ok(match self {
            BatchAffinity::Adjacency => g.adjacency().submatrix(ids),
            BatchAffinity::KPower(a) => a.submatrix(ids),
            BatchAffinity::FeatureEdge { alpha, sigma } => {
                let x = g.features().select(Axis(0), ids);
                let w = gaussian_affinity(x.view(), Bandwidth::Fixed(*sigma))?;
                let a = g.adjacency().submatrix(ids);
                w * *alpha + a * (1.0 - alpha)
            }
        })
    }
}

/// A training batch: node ids (ascending), their features, and the
/// sym-normalized Laplacian of the induced sub-affinity.
#[derive(Debug, Clone)]
pub struct MapBatch {
    pub ids: Vec<usize>,
    pub features: Array2<f64>,
    pub laplacian: Array2<f64>,
}

/// Grows a breadth-first ball from a uniformly drawn seed until `m` nodes are
/// collected, filling any shortfall with uniformly drawn unvisited nodes.
pub fn sample_batch_with_neighbors(
    g: &Graph,
    m: usize,
    rng: &mut Rng,
    affinity: &BatchAffinity,
) -> Result<MapBatch> {
    let n = g.node_count();
    if m == 0 || m > n {
        return Err(crate::error::domain_err!("batch size {m} must lie in [1, {n}]"));
    }
    let ids = bfs_ball(g, m, rng);
    let features = g.features().select(Axis(0), &ids);
    let w = affinity.submatrix(g, &ids)?;
    Ok(MapBatch {
        laplacian: dense_laplacian(w.view()),
        ids,
        features,
    })
}

fn bfs_ball(g: &Graph, m: usize, rng: &mut Rng) -> Vec<usize> {
    let n = g.node_count();
    let mut visited = vec![false; n];
    let mut ids = Vec::with_capacity(m);
    let seed = rng.random_range(0..n);
    visited[seed] = true;
    ids.push(seed);
    let mut queue = VecDeque::from([seed]);
    let mut scratch = Vec::new();
    while ids.len() < m {
        let Some(u) = queue.pop_front() else { break };
        scratch.clear();
        scratch.extend(g.neighbors(u).filter(|&v| !visited[v]));
        scratch.shuffle(rng);
        for &v in &scratch {
            if ids.len() == m {
                break;
            }
            visited[v] = true;
            ids.push(v);
            queue.push_back(v);
        }
    }
    if ids.len() < m {
        let mut rest: Vec<usize> = (0..n).filter(|&i| !visited[i]).collect();
        let (picked, _) = rest.partial_shuffle(rng, m - ids.len());
        ids.extend_from_slice(picked);
    }
    ids.sort_unstable();
    ids
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralMapConfig {
    pub k: usize,
    pub hidden: Vec<usize>,
    /// Batch size `m` for both orthogonalization and gradient steps.
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard cap on iterations (orthogonalization + gradient step pairs).
    pub max_steps: Option<usize>,
    pub optimizer: OptimizerConfig,
    /// Stop when the mean loss of the last `plateau_window` epochs improves
    /// on the mean of the window before it by less than this fraction. `0`
    /// disables the check.
    pub plateau_tolerance: f64,
    pub plateau_window: usize,
    /// Re-fit the orthogonalization layer on every training node at the end.
    pub final_full_ortho: bool,
    /// Project `∂loss/∂Y` onto the tangent space of the whitening
    /// constraint before back-propagating into the body.
    pub project_gradient: bool,
    pub affinity: AffinitySpec,
}

impl SpectralMapConfig {
    /// Hidden 512, 256 with `k = 32`, batch 512.
    pub fn desk_defaults() -> Self {
        Self {
            k: 32,
            hidden: vec![512, 256],
            batch_size: 512,
            epochs: 100,
            max_steps: None,
            optimizer: OptimizerConfig::adam(1e-3).with_weight_decay(1e-5),
            plateau_tolerance: 1e-4,
            plateau_window: 10,
            final_full_ortho: true,
            project_gradient: true,
            affinity: AffinitySpec::Adjacency,
        }
    }

    pub fn validate(&self, node_count: usize) -> Result<()> {
        if self.k == 0 {
            return Err(SparcError::Config("k must be positive".into()));
        }
        if self.batch_size <= self.k {
            return Err(SparcError::Config(format!(
                "batch size {} must exceed k = {}",
                self.batch_size, self.k
            )));
        }
        if self.batch_size > node_count {
            return Err(SparcError::Config(format!(
                "batch size {} exceeds the {node_count} training nodes",
                self.batch_size
            )));
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return Err(SparcError::Config("epochs must be positive".into()));
        }
        self.optimizer
            .validate()
            .map_err(|e| SparcError::Config(e.to_string()))
    }
}

/// Progress notifications emitted during training.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainEvent {
    Ortho { step: usize, report: OrthoReport },
    Gradient { step: usize, loss: f64 },
    Epoch { epoch: usize, mean_loss: f64 },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MapTrace {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    pub ortho_deviations: Vec<f64>,
}

pub fn train_spectral_map(
    g: &Graph,
    config: &SpectralMapConfig,
    seeds: &SeedStreams,
) -> Result<(SpectralMap, MapTrace)> {
    train_spectral_map_observed(g, config, seeds, &mut |_| {})
}

/// Alternates orthogonalization and gradient steps, each on a fresh batch.
pub fn train_spectral_map_observed(
    g: &Graph,
    config: &SpectralMapConfig,
    seeds: &SeedStreams,
    observer: &mut dyn FnMut(&TrainEvent),
) -> Result<(SpectralMap, MapTrace)> {
    let n = g.node_count();
    config.validate(n)?;
    let affinity = BatchAffinity::prepare(g, &config.affinity)?;
    let mut init_rng = seeds.stream(streams::MAP_INIT);
    let mut batch_rng = seeds.stream(streams::MAP_BATCH);
    let mut map = SpectralMap::new(g.feature_dim(), &config.hidden, config.k, &mut init_rng)?;
    let mut opt = Optimizer::new(config.optimizer)?;
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let epoch_steps = match config.epochs {
        0 => usize::MAX,
        e => e.saturating_mul(steps_per_epoch),
    };
    let total_steps = config.max_steps.unwrap_or(usize::MAX).min(epoch_steps);
    let mut trace = MapTrace::default();
    let mut epoch_sum = 0.0;
    let mut epoch_count = 0usize;

    for step in 0..total_steps {
        let ortho_batch = sample_batch_with_neighbors(g, config.batch_size, &mut batch_rng, &affinity)?;
        let report = map.ortho_step(ortho_batch.features.view())?;
        trace.ortho_deviations.push(report.deviation);
        observer(&TrainEvent::Ortho { step, report });

        let batch = sample_batch_with_neighbors(g, config.batch_size, &mut batch_rng, &affinity)?;
        let raw = map.body.forward(batch.features.view())?;
        let y = raw.dot(&map.ortho_weights);
        let (loss, grad_y) = rayleigh_loss(y.view(), batch.laplacian.view())?;
        if !loss.is_finite() {
            return Err(SparcError::Divergence(format!("Rayleigh loss {loss} at step {step}")));
        }
        let grad_y = if config.project_gradient {
            tangent_projection(y.view(), grad_y.view())?
        } else {
            grad_y
        };
        let grad_raw = grad_y.dot(&map.ortho_weights.t());
        let (grads, _) = map.body.backward(grad_raw.view())?;
        opt.step_model(&mut map.body, &grads.slices())
            .map_err(|e| SparcError::Divergence(format!("spectral map step {step}: {e}")))?;
        trace.step_losses.push(loss);
        observer(&TrainEvent::Gradient { step, loss });

        epoch_sum += loss;
        epoch_count += 1;
        if epoch_count == steps_per_epoch || step + 1 == total_steps {
            let mean_loss = epoch_sum / epoch_count as f64;
            let epoch = trace.epoch_losses.len();
            trace.epoch_losses.push(mean_loss);
            observer(&TrainEvent::Epoch { epoch, mean_loss });
            epoch_sum = 0.0;
            epoch_count = 0;
            if plateaued(&trace.epoch_losses, config.plateau_tolerance, config.plateau_window) {
                break;
            }
        }
    }
    if config.final_full_ortho {
        map.ortho_step(g.features().view())?;
    }
    Ok((map, trace))
}

/// Relative improvement of the mean loss over the last `window` epochs
/// against the `window` epochs before them falls below `tolerance`.
fn plateaued(losses: &[f64], tolerance: f64, window: usize) -> bool {
    if tolerance <= 0.0 || window == 0 || losses.len() < 2 * window {
        return false;
    }
    let n = losses.len();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let now = mean(&losses[n - window..]);
    let then = mean(&losses[n - 2 * window..n - window]);
    (then - now) <= tolerance * then.abs().max(f64::MIN_POSITIVE)
}

/// Exact bottom-`k` eigenpairs of a Laplacian.
#[derive(Debug, Clone)]
pub struct ExactSpectrum {
    pub embedding: EmbeddingMatrix,
    /// Ascending, length `k`.
    pub eigenvalues: Array1<f64>,
}

/// Bottom-`k` eigenvectors of a dense copy of `l`. Cyclic Jacobi on small
/// orders, Householder + implicit QR above [`linalg::JACOBI_MAX_ORDER`].
pub fn exact_spectral_embedding(l: &LaplacianMatrix, k: usize) -> Result<ExactSpectrum> {
    let n = l.order();
    let cap = dense_cap(ORACLE_DENSE_CAP);
    if n > cap {
        return Err(SparcError::Capacity(format!(
            "dense eigen-oracle on {n} nodes exceeds cap {cap}"
        )));
    }
    if k == 0 || k > n {
        return Err(crate::error::domain_err!("k = {k} must lie in [1, {n}]"));
    }
    let eig = linalg::symmetric_eigen(l.to_dense().view());
    Ok(ExactSpectrum {
        embedding: EmbeddingMatrix {
            values: eig.vectors.slice(ndarray::s![.., ..k]).to_owned(),
            source: EmbeddingSource::ExactOracle,
        },
        eigenvalues: eig.values.slice(ndarray::s![..k]).to_owned(),
    })
}

/// Principal angles (radians, ascending) between the column spaces of `a`
/// and `b`.
pub fn principal_angles(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Vec<f64>> {
    if a.nrows() != b.nrows() {
        return Err(shape_err!("subspaces live in R^{} and R^{}", a.nrows(), b.nrows()));
    }
    let qa = linalg::orthonormalize(a, 1e-10)?;
    let qb = linalg::orthonormalize(b, 1e-10)?;
    let m = qa.t().dot(&qb);
    let sv = linalg::singular_values(m.view());
    let take = a.ncols().min(b.ncols());
    Ok(sv.into_iter().take(take).map(|s| s.clamp(0.0, 1.0).acos()).collect())
}

/// Mean principal angle in degrees.
pub fn mean_principal_angle_degrees(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    let angles = principal_angles(a, b)?;
    Ok(angles.iter().sum::<f64>() / angles.len() as f64 * 180.0 / std::f64::consts::PI)
}
