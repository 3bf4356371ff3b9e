mod common;

use common::{cases, rng, uniform};
use ndarray::{array, Array2};
use proptest::prelude::*;
use sparc::nn::{nll_loss, softmax_rows, Activation, DenseNet, Optimizer, OptimizerConfig};
use sparc::SparcError;

/// Forward pass written out element by element.
fn scripted_forward(net: &DenseNet, x: &Array2<f64>) -> Array2<f64> {
    let mut h = x.clone();
    for layer in net.layers() {
        let (rows, inp, out) = (h.nrows(), layer.weights.nrows(), layer.weights.ncols());
        let mut next = Array2::zeros((rows, out));
        for r in 0..rows {
            for o in 0..out {
                let mut s = layer.bias[o];
                for i in 0..inp {
                    s += h[[r, i]] * layer.weights[[i, o]];
                }
                next[[r, o]] = match layer.activation {
                    Activation::Relu => s.max(0.0),
                    Activation::Identity => s,
                };
            }
        }
        h = next;
    }
    h
}

#[test]
fn two_layer_forward_matches_scripted_oracle() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let net = DenseNet::new(&[5, 7, 3], Activation::Relu, Activation::Identity, &mut r).unwrap();
        let x = uniform(6, 5, &mut r);
        let got = net.predict(x.view()).unwrap();
        let want = scripted_forward(&net, &x);
        assert!((&got - &want).iter().all(|d| d.abs() < 1e-10));
    }
}

#[test]
fn forward_is_bitwise_repeatable() {
    let mut r = rng(1);
    let mut net = DenseNet::new(&[4, 8, 8, 2], Activation::Relu, Activation::Identity, &mut r).unwrap();
    let x = uniform(9, 4, &mut r);
    let a = net.predict(x.view()).unwrap();
    let b = net.forward(x.view()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn shape_mismatch_is_shape_error() {
    let net = DenseNet::new(&[3, 2], Activation::Relu, Activation::Identity, &mut rng(0)).unwrap();
    assert!(matches!(net.predict(Array2::zeros((2, 4)).view()), Err(SparcError::Shape(_))));
}

#[test]
fn saturated_margin_drives_loss_to_zero() {
    let (loss, _) = nll_loss(array![[200.0, 0.0, 0.0]].view(), &[0]).unwrap();
    assert!(loss < 1e-12);
    let (uniform_loss, _) = nll_loss(Array2::zeros((2, 4)).view(), &[1, 3]).unwrap();
    assert!((uniform_loss - 4f64.ln()).abs() < 1e-15);
}

#[test]
fn target_out_of_range_is_domain_error() {
    assert!(matches!(nll_loss(Array2::zeros((1, 3)).view(), &[3]), Err(SparcError::Domain(_))));
}

#[test]
fn zero_decay_is_a_pure_gradient_step() {
    let mut opt = Optimizer::new(OptimizerConfig::sgd(0.5)).unwrap();
    let mut p = [1.0, -2.0];
    opt.step(vec![&mut p[..]], &[&[0.2, 0.4][..]]).unwrap();
    assert_eq!(p, [0.9, -2.2]);
}

#[test]
fn checkpoint_file_round_trip() {
    let net = DenseNet::new(&[3, 4, 2], Activation::Relu, Activation::Identity, &mut rng(6)).unwrap();
    let mut buf = Vec::new();
    net.write_to(&mut buf).unwrap();
    assert_eq!(&buf[..8], b"SPRCNET1");
    let back = DenseNet::read_from(&mut buf.as_slice()).unwrap();
    assert_eq!(back.layers(), net.layers());
    assert!(DenseNet::read_from(&mut &buf[..buf.len() - 3]).is_err());
}

proptest! {
    #![proptest_config(cases(128))]

    #[test]
    fn nll_is_nonnegative_and_softmax_normalized(
        logits in proptest::collection::vec(-30.0f64..30.0, 12),
        t in proptest::collection::vec(0usize..4, 3),
    ) {
        let z = Array2::from_shape_vec((3, 4), logits).unwrap();
        let (loss, grad) = nll_loss(z.view(), &t).unwrap();
        prop_assert!(loss >= 0.0);
        for row in softmax_rows(z.view()).rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        for row in grad.rows() {
            prop_assert!(row.sum().abs() < 1e-12);
        }
    }

    #[test]
    fn initialization_respects_glorot_bound(inp in 1usize..20, out in 1usize..20, seed in any::<u64>()) {
        let net = DenseNet::new(&[inp, out], Activation::Relu, Activation::Identity, &mut rng(seed)).unwrap();
        let bound = (6.0 / (inp + out) as f64).sqrt();
        let layer = &net.layers()[0];
        prop_assert!(layer.weights.iter().all(|w| w.abs() <= bound));
        prop_assert!(layer.bias.iter().all(|&b| b == 0.0));
    }
}
