//! Finite-difference checks for every trainable component. Each function
//! builds one random instance from `seed` and returns the largest relative
//! error between analytic and central-difference gradients.

use ndarray::{Array1, Array2};
use rand::Rng as _;
use sparc::gcn::SparcGcnModel;
use sparc::laplacian::dense_laplacian;
use sparc::nn::{nll_loss, softmax_rows, Activation, DenseNet};
use sparc::phormer::{AttentionHead, AttentionTrainer, TokenList, TokenProvenance};
use sparc::spectral_map::{orthogonalizer, rayleigh_loss, SpectralMap};

use super::{fd_check, fd_matrix_grad, rel_err, FdCheck, rng, uniform, TestRng};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const INSTANCES: u64 = 20;

fn random_laplacian(m: usize, rng: &mut TestRng) -> Array2<f64> {
    let w = Array2::from_shape_fn((m, m), |_| f64::from(u8::from(rng.random_bool(0.4))));
    let sym = &w + &w.t();
    dense_laplacian(sym.mapv(|v| v.min(1.0)).view())
}

fn dim(rng: &mut TestRng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Rayleigh loss through the map body with the orthogonalization layer
/// computed from a separate batch and then held fixed.
pub fn spectral_map_body(seed: u64) -> FdCheck {
    let mut r = rng(seed);
    let (d, k, m) = (dim(&mut r, 2, 8), dim(&mut r, 1, 4), dim(&mut r, 6, 8));
    let h = dim(&mut r, k + 1, 8);
    let mut map = SpectralMap::new(d, &[h], k, &mut r).unwrap();
    let x = uniform(m, d, &mut r);
    let lap = random_laplacian(m, &mut r);
    let whitened = (0..50).any(|_| map.ortho_step(uniform(8, d, &mut r).view()).is_ok());
    assert!(whitened, "no full-rank whitening batch for seed {seed}");
    let w = map.ortho_weights().clone();
    let body = map.body_mut();
    let raw = body.forward(x.view()).unwrap();
    let (_, gy) = rayleigh_loss(raw.dot(&w).view(), lap.view()).unwrap();
    let (grads, _) = body.backward(gy.dot(&w.t()).view()).unwrap();
    let analytic: Vec<Vec<f64>> = grads.slices().into_iter().map(<[f64]>::to_vec).collect();
    fd_check(body, &analytic, STEP, |b| {
        let y = b.predict(x.view()).unwrap().dot(&w);
        rayleigh_loss(y.view(), lap.view()).unwrap().0
    })
}

/// Gradient of the Rayleigh loss with respect to the embedding itself, for
/// an embedding that has just passed through the orthogonalization layer.
pub fn rayleigh_wrt_embedding(seed: u64) -> FdCheck {
    let mut r = rng(seed);
    let (m, k) = (dim(&mut r, 4, 8), dim(&mut r, 1, 3));
    let raw = uniform(m, k, &mut r);
    let (w, _) = orthogonalizer(raw.view()).unwrap();
    let y = raw.dot(&w);
    let lap = random_laplacian(m, &mut r);
    let (_, analytic) = rayleigh_loss(y.view(), lap.view()).unwrap();
    let numeric = fd_matrix_grad(&y, STEP, |yy| rayleigh_loss(yy.view(), lap.view()).unwrap().0);
    matrix_check(&analytic, &numeric)
}

/// Mean negative log-likelihood with respect to the logits.
pub fn nll_wrt_logits(seed: u64) -> FdCheck {
    let mut r = rng(seed);
    let (b, c) = (dim(&mut r, 1, 8), dim(&mut r, 2, 6));
    let logits = uniform(b, c, &mut r).mapv(|v| 3.0 * v);
    let targets: Vec<usize> = (0..b).map(|_| r.random_range(0..c)).collect();
    let (_, analytic) = nll_loss(logits.view(), &targets).unwrap();
    let numeric = fd_matrix_grad(&logits, STEP, |z| nll_loss(z.view(), &targets).unwrap().0);
    let probs = softmax_rows(logits.view());
    assert!(probs.rows().into_iter().all(|p| (p.sum() - 1.0).abs() < 1e-12));
    matrix_check(&analytic, &numeric)
}

/// Dense classifier with a hidden ReLU layer under the nll loss.
pub fn dense_classifier(seed: u64) -> FdCheck {
    let mut r = rng(seed);
    let (b, d, h, c) = (dim(&mut r, 2, 8), dim(&mut r, 2, 8), dim(&mut r, 2, 8), dim(&mut r, 2, 5));
    let mut net = DenseNet::new(&[d, h, c], Activation::Relu, Activation::Identity, &mut r).unwrap();
    let x = uniform(b, d, &mut r);
    let targets: Vec<usize> = (0..b).map(|_| r.random_range(0..c)).collect();
    let logits = net.forward(x.view()).unwrap();
    let (_, g) = nll_loss(logits.view(), &targets).unwrap();
    let (grads, _) = net.backward(g.view()).unwrap();
    let analytic: Vec<Vec<f64>> = grads.slices().into_iter().map(<[f64]>::to_vec).collect();
    fd_check(&mut net, &analytic, STEP, |n| {
        nll_loss(n.predict(x.view()).unwrap().view(), &targets).unwrap().0
    })
}

/// Spectral filters, feature transforms and readout of the graph network.
pub fn gcn(seed: u64) -> FdCheck {
    let mut r = rng(seed);
    let (m, k, d, c) = (dim(&mut r, 3, 8), dim(&mut r, 2, 6), dim(&mut r, 2, 6), dim(&mut r, 2, 4));
    let hidden = [dim(&mut r, 2, 8), dim(&mut r, 2, 8)];
    let mut model = SparcGcnModel::new(k, d, &hidden, c, &mut r).unwrap();
    for conv in model.convs_mut() {
        conv.filter = Array1::from_shape_fn(k, |_| r.random_range(0.5..1.5));
    }
    let u = uniform(m, k, &mut r);
    let x = uniform(m, d, &mut r);
    let mut targets: Vec<Option<usize>> = (0..m)
        .map(|_| r.random_bool(0.7).then(|| r.random_range(0..c)))
        .collect();
    targets[0] = Some(0);
    let (_, analytic) = model.batch_loss(u.view(), x.view(), &targets).unwrap();
    let rows: Vec<usize> = (0..m).filter(|&i| targets[i].is_some()).collect();
    let t: Vec<usize> = rows.iter().map(|&i| targets[i].unwrap()).collect();
    fd_check(&mut model, &analytic, STEP, |mm| {
        let logits = mm.predict(u.view(), x.view()).unwrap();
        nll_loss(logits.select(ndarray::Axis(0), &rows).view(), &t).unwrap().0
    })
}

/// Query, key, value projections, class token and readout of the attention
/// head, with one or two heads.
pub fn attention(seed: u64) -> FdCheck {
    let mut r = rng(seed);
    let heads = dim(&mut r, 1, 2);
    let (b, t, d, c) = (dim(&mut r, 1, 6), dim(&mut r, 1, 4), dim(&mut r, 2, 8), dim(&mut r, 2, 4));
    let hidden = heads * dim(&mut r, 1, 4);
    let mut head = AttentionHead::new(d, hidden, heads, c, &mut r).unwrap();
    head.class_token = Array1::from_shape_fn(hidden, |_| r.random_range(-0.5..0.5));
    let lists: Vec<TokenList> = (0..b)
        .map(|node| TokenList {
            node,
            tokens: uniform(t + 1, d, &mut r),
            provenance: TokenProvenance::Eigenspace,
        })
        .collect();
    let refs: Vec<&TokenList> = lists.iter().collect();
    let targets: Vec<usize> = (0..b).map(|_| r.random_range(0..c)).collect();
    let mut trainer = AttentionTrainer::new(head);
    let (_, analytic) = trainer.batch_loss(&refs, &targets).unwrap();
    fd_check(&mut trainer, &analytic, STEP, |tr| {
        nll_loss(tr.head.forward(&refs).unwrap().view(), &targets).unwrap().0
    })
}

fn matrix_check(a: &Array2<f64>, b: &Array2<f64>) -> FdCheck {
    FdCheck {
        max_rel_error: a.iter().zip(b.iter()).map(|(&x, &y)| rel_err(x, y)).fold(0.0, f64::max),
        coordinates: a.len(),
        kinks: 0,
    }
}

/// Every check, by name, merged over the instance seeds.
pub fn suite() -> Vec<(&'static str, FdCheck)> {
    let checks: [(&'static str, fn(u64) -> FdCheck); 6] = [
        ("spectral map body", spectral_map_body),
        ("rayleigh wrt embedding", rayleigh_wrt_embedding),
        ("nll wrt logits", nll_wrt_logits),
        ("dense classifier", dense_classifier),
        ("graph network", gcn),
        ("attention head", attention),
    ];
    checks
        .iter()
        .map(|&(name, f)| (name, (0..INSTANCES).map(|s| f(1000 + s)).fold(FdCheck::default(), FdCheck::merge)))
        .collect()
}
