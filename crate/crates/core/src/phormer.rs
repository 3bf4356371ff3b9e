//! Token lists of aggregated neighborhood features and a class-token
//! attention classifier over them.
//!
//! Every list holds `T + 1` tokens. Token 0 is the node's own feature row;
//! token `j ≥ 1` is a mean over a neighborhood that grows with `j`: the
//! `j`-hop ball for hop lists, the `2^j` nearest pool nodes for eigenspace
//! and raw-feature lists.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::coldstart::knn;
use crate::error::{domain_err, shape_err, Result, SparcError};
use crate::graph::Graph;
use crate::nn::{glorot_uniform, nll_loss, softmax_rows, Activation, DenseNet, Optimizer, OptimizerConfig, Trainable};
use crate::rng::{streams, Rng, SeedStreams};
use crate::spectral_map::SpectralMap;

const HEAD_MAGIC: &[u8; 8] = b"SPRCATT1";
const TOKEN_MAGIC: &[u8; 8] = b"SPRCTOK1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenProvenance {
    Hops,
    Eigenspace,
    /// Raw-feature kNN, the feature-baseline variant.
    Features,
}

impl TokenProvenance {
    fn code(self) -> u8 {
        match self {
            TokenProvenance::Hops => 0,
            TokenProvenance::Eigenspace => 1,
            TokenProvenance::Features => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => TokenProvenance::Hops,
            1 => TokenProvenance::Eigenspace,
            2 => TokenProvenance::Features,
            _ => return Err(SparcError::MalformedInput(format!("unknown token provenance {c}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenList {
    pub node: usize,
    /// `(T + 1) × d`.
    pub tokens: Array2<f64>,
    pub provenance: TokenProvenance,
}

impl TokenList {
    /// Configured list size `T` (token 0 not counted).
    pub fn size(&self) -> usize {
        self.tokens.nrows() - 1
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Hop tokens: token `j` is the mean feature over `{v : dist(v, node) ≤ j}`.
pub fn build_token_list_hops(g: &Graph, node: usize, t: usize) -> Result<TokenList> {
    if node >= g.node_count() {
        return Err(domain_err!("node {node} not in a graph of {}", g.node_count()));
    }
    if t == 0 {
        return Err(domain_err!("token list size must be at least 1"));
    }
    let dist = g.bfs_distances(node);
    let d = g.feature_dim();
    let mut sums = Array2::<f64>::zeros((t + 1, d));
    let mut counts = vec![0usize; t + 1];
    for (v, dv) in dist.iter().enumerate() {
        if let Some(dv) = *dv {
            if dv <= t {
                // Add to the first ball that contains v; prefix sums follow.
                sums.row_mut(dv).scaled_add(1.0, &g.feature_row(v));
                counts[dv] += 1;
            }
        }
    }
    for j in 1..=t {
        let prev = sums.row(j - 1).to_owned();
        sums.row_mut(j).scaled_add(1.0, &prev);
        counts[j] += counts[j - 1];
    }
    for j in 0..=t {
        let c = counts[j] as f64;
        sums.row_mut(j).mapv_inplace(|v| v / c);
    }
    Ok(TokenList {
        node,
        tokens: sums,
        provenance: TokenProvenance::Hops,
    })
}

/// Candidate nodes a ranked token list draws from.
#[derive(Debug, Clone, Copy)]
pub struct TokenPool<'a> {
    pub features: ArrayView2<'a, f64>,
    /// Coordinates the ranking is done in: eigenspace rows, or the features
    /// themselves for the baseline.
    pub points: ArrayView2<'a, f64>,
}

impl TokenPool<'_> {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Node ids of the `2^t` nearest pool rows to `query`, nearest first. Token
/// `j` averages the first `2^j` of them.
pub fn ranked_members(pool: &TokenPool, query: ArrayView1<f64>, t: usize) -> Result<Vec<usize>> {
    if t == 0 {
        return Err(domain_err!("token list size must be at least 1"));
    }
    let need = 1usize.checked_shl(t as u32).filter(|&n| n <= pool.len());
    let Some(need) = need else {
        return Err(domain_err!("2^{t} nearest nodes requested from a pool of {}", pool.len()));
    };
    Ok(knn(pool.points, query, need)?.into_iter().map(|n| n.id).collect())
}

fn ranked_tokens(
    pool: &TokenPool,
    node: usize,
    own: ArrayView1<f64>,
    query: ArrayView1<f64>,
    t: usize,
    provenance: TokenProvenance,
) -> Result<TokenList> {
    if own.len() != pool.features.ncols() {
        return Err(shape_err!("features of length {} for a pool of dim {}", own.len(), pool.features.ncols()));
    }
    let members = ranked_members(pool, query, t)?;
    let mut tokens = Array2::zeros((t + 1, own.len()));
    tokens.row_mut(0).assign(&own);
    let mut sum = Array1::<f64>::zeros(own.len());
    let mut taken = 0;
    for j in 1..=t {
        let upto = 1usize << j;
        for &id in &members[taken..upto] {
            sum.scaled_add(1.0, &pool.features.row(id));
        }
        taken = upto;
        tokens.row_mut(j).assign(&sum.mapv(|v| v / upto as f64));
    }
    Ok(TokenList {
        node,
        tokens,
        provenance,
    })
}

/// Eigenspace tokens for feature row `x`: token `j` is the mean feature of
/// the `2^j` pool nodes nearest to `F(x)`. Works the same for training and
/// cold-start nodes.
pub fn build_token_list_eigenspace(
    map: &SpectralMap,
    node: usize,
    x: ArrayView1<f64>,
    pool: &TokenPool,
    t: usize,
) -> Result<TokenList> {
    let u = map.embed(x.insert_axis(Axis(0)))?;
    build_token_list_from_point(pool, node, x, u.values.row(0), t)
}

/// Eigenspace tokens when the query's embedding is already known.
pub fn build_token_list_from_point(
    pool: &TokenPool,
    node: usize,
    x: ArrayView1<f64>,
    u: ArrayView1<f64>,
    t: usize,
) -> Result<TokenList> {
    ranked_tokens(pool, node, x, u, t, TokenProvenance::Eigenspace)
}

/// Baseline tokens ranked by raw-feature distance.
pub fn build_token_list_features(pool_features: ArrayView2<f64>, node: usize, x: ArrayView1<f64>, t: usize) -> Result<TokenList> {
    let pool = TokenPool {
        features: pool_features,
        points: pool_features,
    };
    ranked_tokens(&pool, node, x, x, t, TokenProvenance::Features)
}

/// Writes token lists as binary blocks `(node id, T, d, floats)`.
pub fn write_token_cache(path: &Path, lists: &[TokenList]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    codec::write_magic(&mut w, TOKEN_MAGIC)?;
    codec::write_u64(&mut w, lists.len() as u64)?;
    for l in lists {
        codec::write_u64(&mut w, l.node as u64)?;
        codec::write_u8(&mut w, l.provenance.code())?;
        codec::write_u32(&mut w, codec::dim_u32(l.size())?)?;
        codec::write_u32(&mut w, codec::dim_u32(l.dim())?)?;
        codec::write_matrix(&mut w, &l.tokens)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_token_cache(path: &Path) -> Result<Vec<TokenList>> {
    let mut r = BufReader::new(fs::File::open(path)?);
    codec::read_magic(&mut r, TOKEN_MAGIC)?;
    let count = codec::read_u64(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let node = codec::read_u64(&mut r)? as usize;
        let provenance = TokenProvenance::from_code(codec::read_u8(&mut r)?)?;
        let t = codec::read_u32(&mut r)? as usize;
        let d = codec::read_u32(&mut r)? as usize;
        let tokens = codec::read_matrix(&mut r, t + 1, d)?;
        out.push(TokenList {
            node,
            tokens,
            provenance,
        });
    }
    Ok(out)
}

/// Class-token attention over a token list.
///
/// The query is `c + t₀·W_q` (class token plus the projected own-feature
/// token); keys and values are `t·W_k`, `t·W_v`. With several heads the
/// hidden width is split evenly. Logits are a dense readout of the attended
/// value.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub class_token: Array1<f64>,
    pub readout: DenseNet,
    heads: usize,
}

struct AttentionCache {
    /// Tokens stacked node-major: `B(T+1) × d`.
    tokens: Array2<f64>,
    first: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// `B × heads × (T+1)`, flattened.
    weights: Vec<f64>,
    per_list: usize,
}

/// Attention head with a training cache.
pub struct AttentionTrainer {
    pub head: AttentionHead,
    cache: Option<AttentionCache>,
}

impl AttentionHead {
    pub fn new(input_dim: usize, hidden: usize, heads: usize, classes: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || hidden == 0 || !hidden.is_multiple_of(heads) || classes == 0 || input_dim == 0 {
            return Err(shape_err!(
                "attention dims: input {input_dim}, hidden {hidden}, heads {heads}, classes {classes}"
            ));
        }
        Ok(Self {
            wq: glorot_uniform(input_dim, hidden, rng),
            wk: glorot_uniform(input_dim, hidden, rng),
            wv: glorot_uniform(input_dim, hidden, rng),
            class_token: Array1::zeros(hidden),
            readout: DenseNet::new(&[hidden, classes], Activation::Identity, Activation::Identity, rng)?,
            heads,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.wq.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.wq.ncols()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn class_count(&self) -> usize {
        self.readout.output_dim()
    }

    fn stack(&self, lists: &[&TokenList]) -> Result<(Array2<f64>, Array2<f64>, usize)> {
        let Some(first) = lists.first() else {
            return Err(domain_err!("no token lists"));
        };
        let per = first.tokens.nrows();
        let d = self.input_dim();
        for l in lists {
            if l.tokens.nrows() != per || l.dim() != d {
                return Err(shape_err!(
                    "token list {:?} does not match ({per}, {d})",
                    l.tokens.dim()
                ));
            }
        }
        let mut tokens = Array2::zeros((lists.len() * per, d));
        let mut own = Array2::zeros((lists.len(), d));
        for (b, l) in lists.iter().enumerate() {
            tokens.slice_mut(s![b * per..(b + 1) * per, ..]).assign(&l.tokens);
            own.row_mut(b).assign(&l.tokens.row(0));
        }
        Ok((tokens, own, per))
    }

    /// Returns (attended values `B × h`, cache pieces).
    fn attend(&self, lists: &[&TokenList]) -> Result<(Array2<f64>, AttentionCache)> {
        let (tokens, first, per) = self.stack(lists)?;
        let q = first.dot(&self.wq) + &self.class_token;
        let k = tokens.dot(&self.wk);
        let v = tokens.dot(&self.wv);
        let b = lists.len();
        let h = self.hidden();
        let hs = h / self.heads;
        let scale = 1.0 / (hs as f64).sqrt();
        let mut out = Array2::zeros((b, h));
        let mut weights = vec![0.0; b * self.heads * per];
        for n in 0..b {
            for head in 0..self.heads {
                let cols = head * hs..(head + 1) * hs;
                let qn = q.slice(s![n, cols.clone()]);
                let kn = k.slice(s![n * per..(n + 1) * per, cols.clone()]);
                let scores = kn.dot(&qn).mapv(|x| x * scale).insert_axis(Axis(0));
                let a = softmax_rows(scores.view());
                let vn = v.slice(s![n * per..(n + 1) * per, cols.clone()]);
                out.slice_mut(s![n, cols.clone()]).assign(&a.row(0).dot(&vn));
                let base = (n * self.heads + head) * per;
                weights[base..base + per].copy_from_slice(a.as_slice().expect("row"));
            }
        }
        Ok((
            out,
            AttentionCache {
                tokens,
                first,
                q,
                k,
                v,
                weights,
                per_list: per,
            },
        ))
    }

    /// Class logits for each list.
    pub fn forward(&self, lists: &[&TokenList]) -> Result<Array2<f64>> {
        let (o, _) = self.attend(lists)?;
        self.readout.predict(o.view())
    }

    /// Attention weights, `heads × (T+1)`, for one list.
    pub fn attention_weights(&self, list: &TokenList) -> Result<Array2<f64>> {
        let (_, cache) = self.attend(&[list])?;
        Ok(Array2::from_shape_vec((self.heads, cache.per_list), cache.weights).expect("sized"))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        codec::write_magic(w, HEAD_MAGIC)?;
        codec::write_u32(w, codec::dim_u32(self.input_dim())?)?;
        codec::write_u32(w, codec::dim_u32(self.hidden())?)?;
        codec::write_u32(w, codec::dim_u32(self.heads)?)?;
        codec::write_matrix(w, &self.wq)?;
        codec::write_matrix(w, &self.wk)?;
        codec::write_matrix(w, &self.wv)?;
        codec::write_f64s(w, self.class_token.iter())?;
        self.readout.write_to(w)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        codec::read_magic(r, HEAD_MAGIC)?;
        let d = codec::read_u32(r)? as usize;
        let h = codec::read_u32(r)? as usize;
        let heads = codec::read_u32(r)? as usize;
        if heads == 0 || !h.is_multiple_of(heads) {
            return Err(SparcError::MalformedInput(format!("{heads} heads for hidden {h}")));
        }
        let wq = codec::read_matrix(r, d, h)?;
        let wk = codec::read_matrix(r, d, h)?;
        let wv = codec::read_matrix(r, d, h)?;
        let class_token = codec::read_vector(r, h)?;
        let readout = DenseNet::read_from(r)?;
        if readout.input_dim() != h {
            return Err(SparcError::MalformedInput("readout does not match hidden width".into()));
        }
        Ok(Self {
            wq,
            wk,
            wv,
            class_token,
            readout,
            heads,
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

impl Trainable for AttentionHead {
    fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.wq.as_slice_mut().expect("standard layout"),
            self.wk.as_slice_mut().expect("standard layout"),
            self.wv.as_slice_mut().expect("standard layout"),
            self.class_token.as_slice_mut().expect("standard layout"),
        ];
        out.extend(self.readout.parameters_mut());
        out
    }
}

impl Trainable for AttentionTrainer {
    fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        self.head.parameters_mut()
    }
}

impl AttentionTrainer {
    pub fn new(head: AttentionHead) -> Self {
        Self { head, cache: None }
    }

    pub fn forward(&mut self, lists: &[&TokenList]) -> Result<Array2<f64>> {
        let (o, cache) = self.head.attend(lists)?;
        let logits = self.head.readout.forward(o.view())?;
        self.cache = Some(cache);
        Ok(logits)
    }

    /// Parameter gradients in [`Trainable::parameters_mut`] order.
    pub fn backward(&mut self, upstream: ArrayView2<f64>) -> Result<Vec<Vec<f64>>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| SparcError::State("backward called without a cached forward pass".into()))?;
        let (readout_grads, d_o) = self.head.readout.backward(upstream)?;
        let head = &self.head;
        let per = cache.per_list;
        let b = cache.first.nrows();
        let h = head.hidden();
        let hs = h / head.heads;
        let scale = 1.0 / (hs as f64).sqrt();
        let mut dq = Array2::<f64>::zeros((b, h));
        let mut dk = Array2::<f64>::zeros(cache.k.dim());
        let mut dv = Array2::<f64>::zeros(cache.v.dim());
        for n in 0..b {
            for hd in 0..head.heads {
                let cols = hd * hs..(hd + 1) * hs;
                let base = (n * head.heads + hd) * per;
                let a = &cache.weights[base..base + per];
                let don = d_o.slice(s![n, cols.clone()]);
                let vn = cache.v.slice(s![n * per..(n + 1) * per, cols.clone()]);
                let kn = cache.k.slice(s![n * per..(n + 1) * per, cols.clone()]);
                let qn = cache.q.slice(s![n, cols.clone()]);
                let da: Vec<f64> = (0..per).map(|j| don.dot(&vn.row(j))).collect();
                let mean: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
                let mut dqn = dq.slice_mut(s![n, cols.clone()]);
                for j in 0..per {
                    let ds = a[j] * (da[j] - mean) * scale;
                    dqn.scaled_add(ds, &kn.row(j));
                    dk.slice_mut(s![n * per + j, cols.clone()]).scaled_add(ds, &qn);
                    dv.slice_mut(s![n * per + j, cols.clone()]).scaled_add(a[j], &don);
                }
            }
        }
        let dwq = cache.first.t().dot(&dq);
        let dwk = cache.tokens.t().dot(&dk);
        let dwv = cache.tokens.t().dot(&dv);
        let dc = dq.sum_axis(Axis(0));
        let mut out = vec![
            dwq.iter().copied().collect(),
            dwk.iter().copied().collect(),
            dwv.iter().copied().collect(),
            dc.to_vec(),
        ];
        out.extend(readout_grads.slices().into_iter().map(<[f64]>::to_vec));
        Ok(out)
    }

    /// Mean nll over `lists` and its gradients.
    pub fn batch_loss(&mut self, lists: &[&TokenList], targets: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
        let logits = self.forward(lists)?;
        let (loss, grad) = nll_loss(logits.view(), targets)?;
        Ok((loss, self.backward(grad.view())?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhormerConfig {
    /// Token list size `T`.
    pub token_count: usize,
    pub hidden: usize,
    pub heads: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub provenance: TokenProvenance,
}

impl PhormerConfig {
    pub fn desk_defaults() -> Self {
        Self {
            token_count: 5,
            hidden: 512,
            heads: 1,
            batch_size: 64,
            epochs: 60,
            optimizer: OptimizerConfig::adam(1e-3).with_weight_decay(1e-4),
            provenance: TokenProvenance::Eigenspace,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.token_count == 0 || self.token_count >= 31 {
            return Err(SparcError::Config(format!("token list size {} must lie in [1, 30]", self.token_count)));
        }
        if self.heads == 0 || self.hidden == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(SparcError::Config(format!(
                "hidden width {} must be a positive multiple of {} heads",
                self.hidden, self.heads
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(SparcError::Config("batch size and epochs must be positive".into()));
        }
        self.optimizer.validate().map_err(|e| SparcError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PhormerTrace {
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch nll training over pre-built token lists of labeled nodes.
pub fn train_sparcphormer(
    lists: &[TokenList],
    labels: &[usize],
    classes: usize,
    config: &PhormerConfig,
    seeds: &SeedStreams,
) -> Result<(AttentionHead, PhormerTrace)> {
    config.validate()?;
    if lists.len() != labels.len() || lists.is_empty() {
        return Err(shape_err!("{} token lists for {} labels", lists.len(), labels.len()));
    }
    let mut init = seeds.stream(streams::MODEL_INIT);
    let mut rng = seeds.stream(streams::BATCH);
    let head = AttentionHead::new(lists[0].dim(), config.hidden, config.heads, classes, &mut init)?;
    let mut trainer = AttentionTrainer::new(head);
    let mut opt = Optimizer::new(config.optimizer)?;
    let mut trace = PhormerTrace::default();
    let mut order: Vec<usize> = (0..lists.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TokenList> = chunk.iter().map(|&i| &lists[i]).collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = trainer.batch_loss(&batch, &targets)?;
            if !loss.is_finite() {
                return Err(SparcError::Divergence(format!(
                    "attention loss {loss} in epoch {epoch}; epoch losses so far {:?}",
                    trace.epoch_losses
                )));
            }
            let slices: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            opt.step_model(&mut trainer, &slices).map_err(|e| {
                SparcError::Divergence(format!("attention epoch {epoch}: {e}; epoch losses {:?}", trace.epoch_losses))
            })?;
            total += loss * chunk.len() as f64;
        }
        trace.epoch_losses.push(total / lists.len() as f64);
    }
    Ok((trainer.head, trace))
}

/// Predicted class per list.
pub fn predict_classes(head: &AttentionHead, lists: &[TokenList]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(lists.len());
    for chunk in lists.chunks(256) {
        let refs: Vec<&TokenList> = chunk.iter().collect();
        let logits = head.forward(&refs)?;
        out.extend(logits.axis_iter(Axis(0)).map(|r| crate::gcn::argmax(r)));
    }
    Ok(out)
}
