#![allow(dead_code)]

pub mod grads;
use ndarray::{Array1, Array2};
use rand::Rng as _;
use sparc::nn::Trainable;
pub use sparc::rng::{rng_from_seed as rng, Rng as TestRng};

pub fn uniform(rows: usize, cols: usize, rng: &mut TestRng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

pub fn uniform_vec(len: usize, rng: &mut TestRng) -> Array1<f64> {
    Array1::from_shape_fn(len, |_| rng.random_range(-1.0..1.0))
}

/// Relative error used by the gradient checks: `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FdCheck {
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// Coordinates whose stencil straddled a ReLU kink and were re-evaluated
    /// with a step 100 times smaller.
    pub kinks: usize,
}

impl FdCheck {
    pub fn merge(self, other: FdCheck) -> FdCheck {
        FdCheck {
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            coordinates: self.coordinates + other.coordinates,
            kinks: self.kinks + other.kinks,
        }
    }
}

/// Central differences of `loss` over every parameter of `model`, compared
/// with `analytic`. A coordinate whose one-sided differences disagree with
/// each other is treated as straddling a kink and re-evaluated at `h / 100`.
pub fn fd_check<M: Trainable>(
    model: &mut M,
    analytic: &[Vec<f64>],
    h: f64,
    mut loss: impl FnMut(&mut M) -> f64,
) -> FdCheck {
    let sizes: Vec<usize> = model.parameters_mut().iter().map(|p| p.len()).collect();
    assert_eq!(sizes.len(), analytic.len(), "gradient buffer count");
    let base = loss(model);
    let mut out = FdCheck::default();
    for (i, &len) in sizes.iter().enumerate() {
        assert_eq!(len, analytic[i].len(), "gradient buffer {i} length");
        for j in 0..len {
            let orig = model.parameters_mut()[i][j];
            let mut at = |m: &mut M, v: f64| {
                m.parameters_mut()[i][j] = v;
                loss(m)
            };
            let (up, down) = (at(model, orig + h), at(model, orig - h));
            let mut numeric = (up - down) / (2.0 * h);
            let (fwd, bwd) = ((up - base) / h, (base - down) / h);
            if rel_err(analytic[i][j], numeric) > 1e-6 && rel_err(fwd, bwd) > 1e-3 {
                let small = h / 100.0;
                numeric = (at(model, orig + small) - at(model, orig - small)) / (2.0 * small);
                out.kinks += 1;
            }
            model.parameters_mut()[i][j] = orig;
            out.coordinates += 1;
            out.max_rel_error = out.max_rel_error.max(rel_err(analytic[i][j], numeric));
        }
    }
    out
}

/// Central-difference gradient of a scalar function of a matrix.
pub fn fd_matrix_grad(x: &Array2<f64>, h: f64, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut g = Array2::zeros(x.dim());
    let mut xp = x.clone();
    for idx in ndarray::indices(x.dim()) {
        let orig = xp[idx];
        xp[idx] = orig + h;
        let up = f(&xp);
        xp[idx] = orig - h;
        let down = f(&xp);
        xp[idx] = orig;
        g[idx] = (up - down) / (2.0 * h);
    }
    g
}

/// A connected random graph on `n` nodes: a path plus extra random edges.
pub fn random_connected_edges(n: usize, extra: usize, rng: &mut TestRng) -> Vec<(usize, usize)> {
    let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (i - 1, i)).collect();
    for _ in 0..extra {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a != b {
            edges.push((a, b));
        }
    }
    edges
}

/// Property-test settings: `n` cases, no regression files.
pub fn cases(n: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        cases: n,
        failure_persistence: None,
        ..Default::default()
    }
}
