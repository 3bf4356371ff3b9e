//! Spectral-domain graph convolution with a learned diagonal filter over the
//! learned eigenspace.
//!
//! A batch of `m` nodes with eigenspace rows `Û` is convolved with
//! `Ũ diag(g) Ũᵀ`, where `Ũ = Û/√m`. Each convolution is followed by a dense
//! transform and ReLU; a dense readout produces class logits. A cold-start
//! node is convolved against a fixed neighborhood picked in the eigenspace.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::codec;
use crate::coldstart::knn;
use crate::error::{domain_err, shape_err, Result, SparcError};
use crate::eval::BatchPlan;
use crate::graph::Graph;
use crate::nn::{glorot_uniform, nll_loss, Activation, DenseNet, Optimizer, OptimizerConfig, Trainable};
use crate::rng::{streams, Rng, SeedStreams};

const GCN_MAGIC: &[u8; 8] = b"SPRCGCN1";

/// `relu((U diag(g) Uᵀ X) W)`.
pub fn sparc_conv_layer(
    u: ArrayView2<f64>,
    x: ArrayView2<f64>,
    g: ArrayView1<f64>,
    w: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    check_conv_shapes(u, x, g, w)?;
    Ok(conv_pre_activation(u, x, g, w).mapv(|v| v.max(0.0)))
}

fn check_conv_shapes(u: ArrayView2<f64>, x: ArrayView2<f64>, g: ArrayView1<f64>, w: ArrayView2<f64>) -> Result<()> {
    if u.nrows() != x.nrows() {
        return Err(shape_err!("{} eigenspace rows for {} feature rows", u.nrows(), x.nrows()));
    }
    if g.len() != u.ncols() {
        return Err(shape_err!("filter of length {} for k = {}", g.len(), u.ncols()));
    }
    if w.nrows() != x.ncols() {
        return Err(shape_err!("transform expects {} inputs, features have {}", w.nrows(), x.ncols()));
    }
    Ok(())
}

fn conv_pre_activation(u: ArrayView2<f64>, x: ArrayView2<f64>, g: ArrayView1<f64>, w: ArrayView2<f64>) -> Array2<f64> {
    let mut s = u.t().dot(&x);
    for (mut row, &gi) in s.axis_iter_mut(Axis(0)).zip(g.iter()) {
        row *= gi;
    }
    u.dot(&s).dot(&w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// Diagonal spectral filter, length `k`.
    pub filter: Array1<f64>,
    /// Feature transform `d_in × d_out`.
    pub weights: Array2<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    s: Array2<f64>,
    z: Array2<f64>,
    pre: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct SparcGcnModel {
    convs: Vec<ConvLayer>,
    readout: DenseNet,
    cache: Option<(Array2<f64>, Vec<LayerCache>)>,
}

impl PartialEq for SparcGcnModel {
    fn eq(&self, other: &Self) -> bool {
        self.convs == other.convs && self.readout == other.readout
    }
}

/// Gradients in [`Trainable::parameters_mut`] order.
pub type ParamGrads = Vec<Vec<f64>>;

impl SparcGcnModel {
    /// Convolutions `input_dim → hidden[0] → …` then a readout to `classes`.
    /// Filters start at all-ones.
    pub fn new(k: usize, input_dim: usize, hidden: &[usize], classes: usize, rng: &mut Rng) -> Result<Self> {
        if k == 0 || classes == 0 || hidden.is_empty() || hidden.contains(&0) || input_dim == 0 {
            return Err(shape_err!("invalid SPARC-GCN dims: k={k}, input={input_dim}, hidden={hidden:?}, classes={classes}"));
        }
        let mut convs = Vec::with_capacity(hidden.len());
        let mut d = input_dim;
        for &h in hidden {
            convs.push(ConvLayer {
                filter: Array1::ones(k),
                weights: glorot_uniform(d, h, rng),
            });
            d = h;
        }
        let readout = DenseNet::new(&[d, classes], Activation::Identity, Activation::Identity, rng)?;
        Ok(Self {
            convs,
            readout,
            cache: None,
        })
    }

    pub fn k(&self) -> usize {
        self.convs[0].filter.len()
    }

    pub fn input_dim(&self) -> usize {
        self.convs[0].weights.nrows()
    }

    pub fn class_count(&self) -> usize {
        self.readout.output_dim()
    }

    pub fn convs(&self) -> &[ConvLayer] {
        &self.convs
    }

    pub fn convs_mut(&mut self) -> &mut [ConvLayer] {
        &mut self.convs
    }

    fn check_batch(&self, u: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<()> {
        if u.ncols() != self.k() {
            return Err(shape_err!("eigenspace rows have {} coordinates, model k = {}", u.ncols(), self.k()));
        }
        if x.ncols() != self.input_dim() || x.nrows() != u.nrows() {
            return Err(shape_err!(
                "batch features {:?} for {} eigenspace rows and input dim {}",
                x.dim(),
                u.nrows(),
                self.input_dim()
            ));
        }
        Ok(())
    }

    /// Logits for every batch row. `u` is already scaled (`Û/√m`).
    pub fn predict(&self, u: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_batch(u, x)?;
        let mut h = x.to_owned();
        for c in &self.convs {
            h = sparc_conv_layer(u, h.view(), c.filter.view(), c.weights.view())?;
        }
        self.readout.predict(h.view())
    }

    /// Hidden states of a neighborhood batch after each convolution; entry
    /// `l` is the input to convolution `l`.
    fn layer_inputs(&self, u: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
        let mut states = vec![x.to_owned()];
        for c in &self.convs {
            let h = sparc_conv_layer(u, states.last().expect("nonempty").view(), c.filter.view(), c.weights.view())?;
            states.push(h);
        }
        Ok(states)
    }

    /// Logits for a query row `q` (scaled like `u_n`) convolved against a
    /// neighborhood whose hidden states propagate through the same layers.
    pub fn predict_query(&self, q: ArrayView1<f64>, u_n: ArrayView2<f64>, x_n: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.check_batch(u_n, x_n)?;
        if q.len() != self.k() {
            return Err(shape_err!("query has {} coordinates, model k = {}", q.len(), self.k()));
        }
        let states = self.layer_inputs(u_n, x_n)?;
        let q2 = q.insert_axis(Axis(0));
        let mut h = Array2::zeros((1, 0));
        for (c, hn) in self.convs.iter().zip(&states) {
            let mut s = u_n.t().dot(hn);
            for (mut row, &gi) in s.axis_iter_mut(Axis(0)).zip(c.filter.iter()) {
                row *= gi;
            }
            h = q2.dot(&s).dot(&c.weights).mapv(|v| v.max(0.0));
        }
        Ok(self.readout.predict(h.view())?.row(0).to_owned())
    }

    /// Forward pass that keeps what [`SparcGcnModel::backward`] needs.
    pub fn forward(&mut self, u: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_batch(u, x)?;
        let mut caches = Vec::with_capacity(self.convs.len());
        let mut h = x.to_owned();
        for c in &self.convs {
            let mut s = u.t().dot(&h);
            let raw_s = s.clone();
            for (mut row, &gi) in s.axis_iter_mut(Axis(0)).zip(c.filter.iter()) {
                row *= gi;
            }
            let z = u.dot(&s);
            let pre = z.dot(&c.weights);
            let out = pre.mapv(|v| v.max(0.0));
            h = out;
            caches.push(LayerCache {
                s: raw_s,
                z,
                pre,
            });
        }
        let logits = self.readout.forward(h.view())?;
        self.cache = Some((u.to_owned(), caches));
        Ok(logits)
    }

    /// Parameter gradients given `∂loss/∂logits`.
    pub fn backward(&mut self, upstream: ArrayView2<f64>) -> Result<ParamGrads> {
        let (u, caches) = self
            .cache
            .take()
            .ok_or_else(|| SparcError::State("backward called without a cached forward pass".into()))?;
        let (readout_grads, mut dh) = self.readout.backward(upstream)?;
        let mut conv_grads = Vec::with_capacity(self.convs.len());
        for (c, cache) in self.convs.iter().zip(caches).rev() {
            let mut da = dh;
            ndarray::Zip::from(&mut da).and(&cache.pre).for_each(|d, &p| {
                if p <= 0.0 {
                    *d = 0.0;
                }
            });
            let dw = cache.z.t().dot(&da);
            let dz = da.dot(&c.weights.t());
            let dt = u.t().dot(&dz);
            let dg: Array1<f64> = (&dt * &cache.s).sum_axis(Axis(1));
            let mut ds = dt;
            for (mut row, &gi) in ds.axis_iter_mut(Axis(0)).zip(c.filter.iter()) {
                row *= gi;
            }
            dh = u.dot(&ds);
            conv_grads.push((dg, dw));
        }
        conv_grads.reverse();
        let mut out: ParamGrads = Vec::new();
        for (dg, dw) in conv_grads {
            out.push(dg.to_vec());
            out.push(dw.iter().copied().collect());
        }
        out.extend(readout_grads.slices().into_iter().map(<[f64]>::to_vec));
        Ok(out)
    }

    /// Mean nll over rows with a target, and its parameter gradients.
    pub fn batch_loss(
        &mut self,
        u: ArrayView2<f64>,
        x: ArrayView2<f64>,
        targets: &[Option<usize>],
    ) -> Result<(f64, ParamGrads)> {
        let logits = self.forward(u, x)?;
        let rows: Vec<usize> = (0..targets.len()).filter(|&i| targets[i].is_some()).collect();
        if rows.is_empty() {
            self.cache = None;
            return Err(SparcError::DegenerateBatch("batch has no labeled node".into()));
        }
        let picked = logits.select(Axis(0), &rows);
        let t: Vec<usize> = rows.iter().map(|&i| targets[i].expect("filtered")).collect();
        let (loss, grad) = nll_loss(picked.view(), &t)?;
        let mut full = Array2::zeros(logits.dim());
        for (r, &i) in rows.iter().enumerate() {
            full.row_mut(i).assign(&grad.row(r));
        }
        Ok((loss, self.backward(full.view())?))
    }

    pub fn is_finite(&self) -> bool {
        self.readout.is_finite()
            && self
                .convs
                .iter()
                .all(|c| c.filter.iter().chain(c.weights.iter()).all(|v| v.is_finite()))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        codec::write_magic(w, GCN_MAGIC)?;
        codec::write_u32(w, codec::dim_u32(self.k())?)?;
        codec::write_u32(w, codec::dim_u32(self.convs.len())?)?;
        for c in &self.convs {
            codec::write_u32(w, codec::dim_u32(c.weights.nrows())?)?;
            codec::write_u32(w, codec::dim_u32(c.weights.ncols())?)?;
            codec::write_f64s(w, c.filter.iter())?;
            codec::write_matrix(w, &c.weights)?;
        }
        self.readout.write_to(w)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        codec::read_magic(r, GCN_MAGIC)?;
        let k = codec::read_u32(r)? as usize;
        let layers = codec::read_u32(r)? as usize;
        let mut convs = Vec::with_capacity(layers);
        let mut prev: Option<usize> = None;
        for _ in 0..layers {
            let din = codec::read_u32(r)? as usize;
            let dout = codec::read_u32(r)? as usize;
            if prev.is_some_and(|p| p != din) {
                return Err(SparcError::MalformedInput("convolution dims do not chain".into()));
            }
            prev = Some(dout);
            let filter = codec::read_vector(r, k)?;
            let weights = codec::read_matrix(r, din, dout)?;
            convs.push(ConvLayer { filter, weights });
        }
        let readout = DenseNet::read_from(r)?;
        if convs.is_empty() || prev != Some(readout.input_dim()) {
            return Err(SparcError::MalformedInput("readout does not match the last convolution".into()));
        }
        Ok(Self {
            convs,
            readout,
            cache: None,
        })
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

impl Trainable for SparcGcnModel {
    fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for c in &mut self.convs {
            out.push(c.filter.as_slice_mut().expect("standard layout"));
            out.push(c.weights.as_slice_mut().expect("standard layout"));
        }
        out.extend(self.readout.parameters_mut());
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnConfig {
    pub hidden: Vec<usize>,
    /// Eigenspace-ball size `m`.
    pub batch_size: usize,
    pub steps: usize,
    pub optimizer: OptimizerConfig,
    /// Resamples allowed when a ball holds no labeled node.
    pub max_retries: usize,
}

impl GcnConfig {
    pub fn desk_defaults() -> Self {
        Self {
            hidden: vec![64, 256],
            batch_size: 64,
            steps: 400,
            optimizer: OptimizerConfig::adam(0.01).with_weight_decay(5e-4),
            max_retries: 20,
        }
    }

    pub fn validate(&self, node_count: usize) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(SparcError::Config("GCN hidden dims must be positive".into()));
        }
        if self.batch_size == 0 || self.batch_size > node_count {
            return Err(SparcError::Config(format!(
                "GCN batch size {} must lie in [1, {node_count}]",
                self.batch_size
            )));
        }
        self.optimizer.validate().map_err(|e| SparcError::Config(e.to_string()))
    }
}

/// Embedded training graph a model is trained and queried against.
#[derive(Debug, Clone)]
pub struct EigenContext<'a> {
    pub graph: &'a Graph,
    /// `Û`: one eigenspace row per graph node.
    pub embedding: ArrayView2<'a, f64>,
}

impl EigenContext<'_> {
    fn check(&self) -> Result<()> {
        if self.embedding.nrows() != self.graph.node_count() {
            return Err(shape_err!(
                "{} embedding rows for {} nodes",
                self.embedding.nrows(),
                self.graph.node_count()
            ));
        }
        Ok(())
    }

    /// Scaled eigenspace rows and features for `ids`.
    fn batch(&self, ids: &[usize]) -> (Array2<f64>, Array2<f64>) {
        let scale = 1.0 / (ids.len() as f64).sqrt();
        (
            self.embedding.select(Axis(0), ids).mapv(|v| v * scale),
            self.graph.features().select(Axis(0), ids),
        )
    }

    /// The seed plus its `m - 1` nearest nodes in the eigenspace.
    pub fn eigen_ball(&self, seed: usize, m: usize) -> Result<Vec<usize>> {
        let mut ids: Vec<usize> = knn(self.embedding, self.embedding.row(seed), m)?
            .into_iter()
            .map(|n| n.id)
            .collect();
        if !ids.contains(&seed) {
            ids.pop();
            ids.insert(0, seed);
        }
        Ok(ids)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GcnTrace {
    pub step_losses: Vec<f64>,
    pub resampled: usize,
}

fn targets_for(ids: &[usize], labels: &[Option<usize>]) -> Vec<Option<usize>> {
    ids.iter().map(|&i| labels[i]).collect()
}

fn optimizer_step(opt: &mut Optimizer, model: &mut SparcGcnModel, grads: &ParamGrads, step: usize) -> Result<()> {
    let slices: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
    opt.step_model(model, &slices)
        .map_err(|e| SparcError::Divergence(format!("SPARC-GCN step {step}: {e}")))
}

/// Trains on eigenspace balls around uniformly drawn seeds; only nodes with
/// `labels[i] = Some(_)` contribute to the loss.
pub fn train_sparc_gcn(
    ctx: &EigenContext,
    labels: &[Option<usize>],
    classes: usize,
    config: &GcnConfig,
    seeds: &SeedStreams,
) -> Result<(SparcGcnModel, GcnTrace)> {
    ctx.check()?;
    let n = ctx.graph.node_count();
    config.validate(n)?;
    if labels.len() != n {
        return Err(shape_err!("{} labels for {n} nodes", labels.len()));
    }
    if let Some(bad) = labels.iter().flatten().find(|&&l| l >= classes) {
        return Err(domain_err!("label {bad} outside {classes} classes"));
    }
    let mut init = seeds.stream(streams::MODEL_INIT);
    let mut rng = seeds.stream(streams::BATCH);
    let mut model = SparcGcnModel::new(ctx.embedding.ncols(), ctx.graph.feature_dim(), &config.hidden, classes, &mut init)?;
    let mut opt = Optimizer::new(config.optimizer)?;
    let mut trace = GcnTrace::default();
    for step in 0..config.steps {
        let mut attempt = 0;
        let (ids, targets) = loop {
            let ids = ctx.eigen_ball(rng.random_range(0..n), config.batch_size)?;
            let targets = targets_for(&ids, labels);
            if targets.iter().any(Option::is_some) {
                break (ids, targets);
            }
            attempt += 1;
            trace.resampled += 1;
            if attempt > config.max_retries {
                return Err(SparcError::DegenerateBatch(format!(
                    "no labeled node in {attempt} consecutive eigenspace balls at step {step}"
                )));
            }
        };
        let (u, x) = ctx.batch(&ids);
        let (loss, grads) = model.batch_loss(u.view(), x.view(), &targets)?;
        if !loss.is_finite() {
            return Err(SparcError::Divergence(format!("SPARC-GCN loss {loss} at step {step}")));
        }
        optimizer_step(&mut opt, &mut model, &grads, step)?;
        trace.step_losses.push(loss);
    }
    Ok((model, trace))
}

/// Trains for `config.steps` steps cycling through the batches of `plan`,
/// reshuffling batch order each pass. Batches without labels are skipped.
pub fn train_sparc_gcn_on_plan(
    ctx: &EigenContext,
    labels: &[Option<usize>],
    classes: usize,
    plan: &BatchPlan,
    config: &GcnConfig,
    seeds: &SeedStreams,
) -> Result<(SparcGcnModel, GcnTrace)> {
    ctx.check()?;
    let n = ctx.graph.node_count();
    plan.check_partition(n)?;
    if labels.len() != n {
        return Err(shape_err!("{} labels for {n} nodes", labels.len()));
    }
    let mut init = seeds.stream(streams::MODEL_INIT);
    let mut rng = seeds.stream(streams::BATCH);
    let mut model = SparcGcnModel::new(ctx.embedding.ncols(), ctx.graph.feature_dim(), &config.hidden, classes, &mut init)?;
    let mut opt = Optimizer::new(config.optimizer)?;
    let mut trace = GcnTrace::default();
    let usable: Vec<&Vec<usize>> = plan
        .batches
        .iter()
        .filter(|b| b.iter().any(|&i| labels[i].is_some()))
        .collect();
    if usable.is_empty() {
        return Err(SparcError::DegenerateBatch("no batch in the plan holds a labeled node".into()));
    }
    trace.resampled = plan.batches.len() - usable.len();
    let mut order: Vec<usize> = Vec::new();
    for step in 0..config.steps {
        if order.is_empty() {
            order = (0..usable.len()).collect();
            order.shuffle(&mut rng);
        }
        let ids = usable[order.pop().expect("refilled")];
        let (u, x) = ctx.batch(ids);
        let (loss, grads) = model.batch_loss(u.view(), x.view(), &targets_for(ids, labels))?;
        if !loss.is_finite() {
            return Err(SparcError::Divergence(format!("SPARC-GCN loss {loss} at step {step}")));
        }
        optimizer_step(&mut opt, &mut model, &grads, step)?;
        trace.step_losses.push(loss);
    }
    Ok((model, trace))
}

/// Mean nll over the labeled nodes of every batch in `plan`, each batch run
/// as one forward pass.
pub fn plan_loss(model: &SparcGcnModel, ctx: &EigenContext, labels: &[Option<usize>], plan: &BatchPlan) -> Result<f64> {
    ctx.check()?;
    plan.check_partition(ctx.graph.node_count())?;
    let mut total = 0.0;
    let mut count = 0usize;
    for ids in &plan.batches {
        let rows: Vec<usize> = (0..ids.len()).filter(|&r| labels[ids[r]].is_some()).collect();
        if rows.is_empty() {
            continue;
        }
        let (u, x) = ctx.batch(ids);
        let logits = model.predict(u.view(), x.view())?;
        let targets: Vec<usize> = rows.iter().map(|&r| labels[ids[r]].expect("filtered")).collect();
        let (loss, _) = nll_loss(logits.select(Axis(0), &rows).view(), &targets)?;
        total += loss * rows.len() as f64;
        count += rows.len();
    }
    if count == 0 {
        return Err(SparcError::DegenerateBatch("no labeled node in the plan".into()));
    }
    Ok(total / count as f64)
}

/// Logits for a query point against the fixed neighborhood `neighbors`.
pub fn infer_with_neighborhood(
    model: &SparcGcnModel,
    ctx: &EigenContext,
    query: ArrayView1<f64>,
    neighbors: &[usize],
) -> Result<Array1<f64>> {
    ctx.check()?;
    if neighbors.is_empty() {
        return Err(domain_err!("empty neighborhood"));
    }
    let (u_n, x_n) = ctx.batch(neighbors);
    let q = query.mapv(|v| v / (neighbors.len() as f64).sqrt());
    model.predict_query(q.view(), u_n.view(), x_n.view())
}

/// Cold-start logits: `u` is the node's embedding, its neighborhood the
/// `k_neighbors` nearest training nodes to `u`.
pub fn infer_cold_start(
    model: &SparcGcnModel,
    ctx: &EigenContext,
    u: ArrayView1<f64>,
    k_neighbors: usize,
) -> Result<Array1<f64>> {
    let pool = ctx.graph.node_count();
    if k_neighbors == 0 || k_neighbors > pool {
        return Err(domain_err!("k_neighbors = {k_neighbors} must lie in [1, {pool}]"));
    }
    let ids: Vec<usize> = knn(ctx.embedding, u, k_neighbors)?.into_iter().map(|n| n.id).collect();
    infer_with_neighborhood(model, ctx, u, &ids)
}

/// Logits for a training node using its graph neighborhood (itself included).
pub fn infer_connected(model: &SparcGcnModel, ctx: &EigenContext, node: usize) -> Result<Array1<f64>> {
    let mut ids = vec![node];
    ids.extend(ctx.graph.neighbors(node));
    infer_with_neighborhood(model, ctx, ctx.embedding.row(node), &ids)
}

/// Default cold-start neighborhood size: the mean training degree, rounded,
/// at least 1.
pub fn default_k_neighbors(g: &Graph) -> usize {
    (g.mean_degree().round() as usize).clamp(1, g.node_count())
}

pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
