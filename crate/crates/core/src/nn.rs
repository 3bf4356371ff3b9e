//! Dense layers with hand-derived reverse-mode gradients, the negative
//! log-likelihood loss, and SGD / Adam optimizers with decoupled weight decay.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::{domain_err, shape_err, Result, SparcError};
use crate::rng::Rng;

const NET_MAGIC: &[u8; 8] = b"SPRCNET1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => z.mapv(|v| v.max(0.0)),
            Activation::Identity => z.clone(),
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Relu => 1,
            Activation::Identity => 0,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Relu),
            other => Err(SparcError::MalformedInput(format!("unknown activation code {other}"))),
        }
    }
}

/// Glorot-uniform matrix, `U(±√(6/(fan_in+fan_out)))`.
pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `in × out`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn input_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.ncols()
    }
}

#[derive(Debug, Clone)]
struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
}

/// Gradients of a [`DenseNet`], one `(dW, db)` pair per layer.
#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl DenseGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [w.as_slice().expect("standard layout"), b.as_slice().expect("standard layout")])
            .collect()
    }
}

/// Anything with a fixed, ordered list of parameter buffers.
pub trait Trainable {
    fn parameters_mut(&mut self) -> Vec<&mut [f64]>;
}

/// Feed-forward stack of affine layers.
#[derive(Debug, Clone)]
pub struct DenseNet {
    layers: Vec<DenseLayer>,
    cache: Option<ForwardCache>,
}

impl PartialEq for DenseNet {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl DenseNet {
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(shape_err!("a network needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(shape_err!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].output_dim(),
                    i + 1,
                    pair[1].input_dim()
                ));
            }
        }
        for l in &layers {
            if l.bias.len() != l.output_dim() {
                return Err(shape_err!("bias length {} vs output {}", l.bias.len(), l.output_dim()));
            }
        }
        Ok(Self { layers, cache: None })
    }

    /// `dims = [in, h1, ..., out]`; hidden layers use `hidden`, the last layer
    /// `output`.
    pub fn new(dims: &[usize], hidden: Activation, output: Activation, rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(shape_err!("need input and output dimensions"));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| DenseLayer {
                weights: glorot_uniform(w[0], w[1], rng),
                bias: Array1::zeros(w[1]),
                activation: if i + 2 == dims.len() { output } else { hidden },
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Inference-only forward pass; leaves no cache.
    pub fn predict(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(batch)?;
        let mut x = batch.to_owned();
        for l in &self.layers {
            let z = x.dot(&l.weights) + &l.bias;
            x = l.activation.apply(&z);
        }
        Ok(x)
    }

    /// Forward pass that retains intermediates for [`DenseNet::backward`].
    pub fn forward(&mut self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(batch)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = batch.to_owned();
        for l in &self.layers {
            let z = x.dot(&l.weights) + &l.bias;
            let a = l.activation.apply(&z);
            inputs.push(x);
            pre.push(z);
            x = a;
        }
        self.cache = Some(ForwardCache {
            inputs,
            pre_activations: pre,
        });
        Ok(x)
    }

    /// Gradients of the parameters and the input, given `∂loss/∂output`.
    /// Consumes the cache left by the last [`DenseNet::forward`].
    pub fn backward(&mut self, upstream: ArrayView2<f64>) -> Result<(DenseGrads, Array2<f64>)> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| SparcError::State("backward called without a cached forward pass".into()))?;
        let m = cache.inputs[0].nrows();
        if upstream.dim() != (m, self.output_dim()) {
            return Err(shape_err!(
                "upstream gradient {:?}, expected ({m}, {})",
                upstream.dim(),
                self.output_dim()
            ));
        }
        let mut grad = upstream.to_owned();
        let mut grads = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate().rev() {
            if l.activation == Activation::Relu {
                ndarray::Zip::from(&mut grad)
                    .and(&cache.pre_activations[i])
                    .for_each(|g, &z| {
                        if z <= 0.0 {
                            *g = 0.0;
                        }
                    });
            }
            let dw = cache.inputs[i].t().dot(&grad).as_standard_layout().into_owned();
            let db = grad.sum_axis(Axis(0));
            let dx = grad.dot(&l.weights.t());
            grads.push((dw, db));
            grad = dx;
        }
        grads.reverse();
        Ok((DenseGrads { layers: grads }, grad))
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    fn check_input(&self, batch: ArrayView2<f64>) -> Result<()> {
        if batch.ncols() != self.input_dim() {
            return Err(shape_err!(
                "batch has {} columns, network expects {}",
                batch.ncols(),
                self.input_dim()
            ));
        }
        Ok(())
    }

    /// Checkpoint: magic, layer count, per-layer `(in, out, activation)`,
    /// then each layer's weights (row-major) and bias as little-endian f64.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        codec::write_magic(w, NET_MAGIC)?;
        codec::write_u32(w, codec::dim_u32(self.layers.len())?)?;
        for l in &self.layers {
            codec::write_u32(w, codec::dim_u32(l.input_dim())?)?;
            codec::write_u32(w, codec::dim_u32(l.output_dim())?)?;
            codec::write_u8(w, l.activation.code())?;
        }
        for l in &self.layers {
            codec::write_matrix(w, &l.weights)?;
            codec::write_f64s(w, l.bias.iter())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        codec::read_magic(r, NET_MAGIC)?;
        let count = codec::read_u32(r)? as usize;
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let i = codec::read_u32(r)? as usize;
            let o = codec::read_u32(r)? as usize;
            let a = Activation::from_code(codec::read_u8(r)?)?;
            shapes.push((i, o, a));
        }
        let mut layers = Vec::with_capacity(count);
        for (i, o, activation) in shapes {
            let weights = codec::read_matrix(r, i, o)?;
            let bias = codec::read_vector(r, o)?;
            layers.push(DenseLayer {
                weights,
                bias,
                activation,
            });
        }
        Self::from_layers(layers)
    }
}

impl Trainable for DenseNet {
    fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weights.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }
}

/// Row-wise softmax.
pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Mean negative log-likelihood of `targets` under `softmax(logits)`, and
/// its gradient `(softmax - onehot) / m`.
pub fn nll_loss(logits: ArrayView2<f64>, targets: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (m, classes) = logits.dim();
    if targets.len() != m {
        return Err(shape_err!("{} targets for {m} rows", targets.len()));
    }
    if m == 0 {
        return Err(domain_err!("nll over an empty batch"));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
        return Err(domain_err!("target {t} outside [0, {classes})"));
    }
    let mut grad = Array2::zeros((m, classes));
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[t];
        for c in 0..classes {
            grad[[i, c]] = (row[c] - log_z).exp() / m as f64;
        }
        grad[[i, t]] -= 1.0 / m as f64;
    }
    Ok((loss / m as f64, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Linear warmup length in steps; 0 keeps the rate constant.
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            ..Self::adam(learning_rate)
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate,
            weight_decay: 0.0,
            warmup_steps: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(domain_err!("learning rate {} must be positive", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(domain_err!("weight decay {} must be nonnegative", self.weight_decay));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    fn current_rate(&self) -> f64 {
        let w = self.config.warmup_steps;
        if w == 0 {
            self.config.learning_rate
        } else {
            self.config.learning_rate * ((self.step + 1) as f64 / w as f64).min(1.0)
        }
    }

    /// Applies one update. Gradients are validated before any parameter is
    /// touched.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(shape_err!("{} parameter buffers, {} gradients", params.len(), grads.len()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(shape_err!("buffer {i}: {} parameters, {} gradients", p.len(), g.len()));
            }
            if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                return Err(SparcError::Divergence(format!(
                    "non-finite gradient {} at buffer {i}, entry {pos}, optimizer step {}",
                    g[pos], self.step
                )));
            }
        }
        if self.config.kind == OptimizerKind::Adam && self.first_moment.is_empty() {
            self.first_moment = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second_moment = self.first_moment.clone();
        }
        if self.config.kind == OptimizerKind::Adam {
            let shapes_match = self.first_moment.len() == grads.len()
                && self.first_moment.iter().zip(grads).all(|(m, g)| m.len() == g.len());
            if !shapes_match {
                return Err(shape_err!("gradient layout changed between optimizer steps"));
            }
        }
        let lr = self.current_rate();
        let decay = 1.0 - lr * self.config.weight_decay;
        let t = (self.step + 1) as i32;
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    for (x, &d) in p.iter_mut().zip(g.iter()) {
                        *x = *x * decay - lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                let OptimizerConfig {
                    beta1,
                    beta2,
                    epsilon,
                    ..
                } = self.config;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
                    let m = &mut self.first_moment[i];
                    let v = &mut self.second_moment[i];
                    for j in 0..p.len() {
                        let d = g[j];
                        m[j] = beta1 * m[j] + (1.0 - beta1) * d;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * d * d;
                        let mhat = m[j] / c1;
                        let vhat = v[j] / c2;
                        p[j] = p[j] * decay - lr * mhat / (vhat.sqrt() + epsilon);
                    }
                }
            }
        }
        self.step += 1;
        Ok(())
    }

    /// Steps `model` and verifies every parameter stays finite.
    pub fn step_model<T: Trainable>(&mut self, model: &mut T, grads: &[&[f64]]) -> Result<()> {
        let step = self.step;
        self.step(model.parameters_mut(), grads)?;
        if model.parameters_mut().iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(SparcError::Divergence(format!(
                "non-finite parameter after optimizer step {step}"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn identity_layer_passes_input_through() {
        let net = DenseNet::from_layers(vec![DenseLayer {
            weights: Array2::eye(3),
            bias: Array1::zeros(3),
            activation: Activation::Identity,
        }])
        .unwrap();
        let x = array![[1.0, -2.0, 3.0], [0.5, 0.0, -1.0]];
        assert_eq!(net.predict(x.view()).unwrap(), x);
    }

    #[test]
    fn relu_clamps_negatives() {
        let net = DenseNet::from_layers(vec![DenseLayer {
            weights: Array2::eye(2),
            bias: Array1::zeros(2),
            activation: Activation::Relu,
        }])
        .unwrap();
        assert_eq!(net.predict(array![[-1.0, 2.0]].view()).unwrap(), array![[0.0, 2.0]]);
    }

    #[test]
    fn linear_backward_with_ones() {
        let mut rng = rng_from_seed(1);
        let mut net = DenseNet::new(&[3, 2], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let x = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        net.forward(x.view()).unwrap();
        let (g, _) = net.backward(Array2::ones((2, 2)).view()).unwrap();
        let expected_dw = x.t().dot(&Array2::<f64>::ones((2, 2)));
        assert_eq!(g.layers[0].0, expected_dw);
        assert_eq!(g.layers[0].1, array![2.0, 2.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = rng_from_seed(2);
        let mut net = DenseNet::new(&[4, 5, 3], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let x = glorot_uniform(6, 4, &mut rng);
        net.forward(x.view()).unwrap();
        let (g, dx) = net.backward(Array2::zeros((6, 3)).view()).unwrap();
        assert!(g.slices().iter().all(|s| s.iter().all(|&v| v == 0.0)));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_without_forward_is_state_error() {
        let mut rng = rng_from_seed(3);
        let mut net = DenseNet::new(&[2, 2], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        assert!(matches!(net.backward(Array2::zeros((1, 2)).view()), Err(SparcError::State(_))));
    }

    #[test]
    fn mismatched_layers_rejected() {
        let bad = DenseNet::from_layers(vec![
            DenseLayer { weights: Array2::zeros((2, 3)), bias: Array1::zeros(3), activation: Activation::Relu },
            DenseLayer { weights: Array2::zeros((4, 1)), bias: Array1::zeros(1), activation: Activation::Identity },
        ]);
        assert!(matches!(bad, Err(SparcError::Shape(_))));
        let mut rng = rng_from_seed(0);
        let net = DenseNet::new(&[2, 2], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        assert!(matches!(net.predict(Array2::zeros((1, 3)).view()), Err(SparcError::Shape(_))));
    }

    #[test]
    fn nll_uniform_logits() {
        let (loss, _) = nll_loss(Array2::zeros((3, 4)).view(), &[0, 1, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
        let (sat, _) = nll_loss(array![[100.0, -100.0]].view(), &[0]).unwrap();
        assert!((0.0..1e-80).contains(&sat));
        assert!(matches!(nll_loss(Array2::zeros((1, 2)).view(), &[2]), Err(SparcError::Domain(_))));
    }

    #[test]
    fn sgd_scalar_step() {
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1)).unwrap();
        let mut p = [0.0];
        opt.step(vec![&mut p[..]], &[&[1.0]]).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-15);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn decoupled_decay_shrinks_parameters() {
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1).with_weight_decay(0.5)).unwrap();
        let mut p = [2.0];
        opt.step(vec![&mut p[..]], &[&[0.0]]).unwrap();
        assert!((p[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1)).unwrap();
        let mut p = [1.0, 2.0];
        let err = opt.step(vec![&mut p[..]], &[&[0.0, f64::NAN]]).unwrap_err();
        assert!(matches!(err, SparcError::Divergence(_)));
        assert_eq!(p, [1.0, 2.0]);
    }

    #[test]
    fn adam_decreases_convex_quadratic() {
        // f(p) = Σ c_i (p_i - t_i)^2
        let c = [1.0, 10.0, 0.5];
        let t = [3.0, -1.0, 2.0];
        let f = |p: &[f64]| -> f64 { (0..3).map(|i| c[i] * (p[i] - t[i]).powi(2)).sum() };
        let mut p = vec![0.0; 3];
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.05)).unwrap();
        let start = f(&p);
        let mut prev = start;
        for step in 0..100 {
            let g: Vec<f64> = (0..3).map(|i| 2.0 * c[i] * (p[i] - t[i])).collect();
            opt.step(vec![&mut p[..]], &[&g]).unwrap();
            if step % 20 == 19 {
                let now = f(&p);
                assert!(now < prev, "loss went from {prev} to {now} by step {step}");
                prev = now;
            }
        }
        assert!(f(&p) < 0.05 * start);
    }

    #[test]
    fn warmup_ramps_rate() {
        let mut cfg = OptimizerConfig::sgd(1.0);
        cfg.warmup_steps = 4;
        let mut opt = Optimizer::new(cfg).unwrap();
        let mut p = [0.0];
        opt.step(vec![&mut p[..]], &[&[1.0]]).unwrap();
        assert!((p[0] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = rng_from_seed(9);
        let net = DenseNet::new(&[3, 4, 2], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let mut buf = Vec::new();
        net.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"SPRCNET1");
        let back = DenseNet::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, net);
        let mut corrupt = buf.clone();
        corrupt[0] = b'X';
        assert!(DenseNet::read_from(&mut corrupt.as_slice()).is_err());
    }
}
