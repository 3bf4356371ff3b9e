mod common;

use common::{cases, random_connected_edges, rng, uniform};
use itertools::Itertools;
use ndarray::{Array2, ArrayView2};
use proptest::prelude::*;
use rand::Rng as _;
use sparc::eval::{
    hungarian_accuracy, intra_batch_edge_fraction, kmeans, random_minibatches, spectral_minibatches, BatchMethod,
    BatchPlan,
};
use sparc::graph::Graph;
use sparc::laplacian::sym_normalized_laplacian;
use sparc::spectral_map::exact_spectral_embedding;
use sparc::synthetic::{sbm, two_cliques, SbmConfig};
use sparc::SparcError;

fn inertia_of(points: ArrayView2<f64>, centroids: &Array2<f64>, assign: &[usize]) -> f64 {
    points
        .rows()
        .into_iter()
        .zip(assign)
        .map(|(p, &a)| (&p - &centroids.row(a)).mapv(|v| v * v).sum())
        .sum()
}

/// Plain Lloyd from `c` distinct random points, as an independent reference.
fn reference_lloyd(points: ArrayView2<f64>, c: usize, r: &mut common::TestRng) -> f64 {
    let n = points.nrows();
    let init = rand::seq::index::sample(r, n, c).into_vec();
    let mut cent = points.select(ndarray::Axis(0), &init);
    let mut assign = vec![0; n];
    for _ in 0..300 {
        let before = assign.clone();
        for (i, p) in points.rows().into_iter().enumerate() {
            assign[i] = (0..c)
                .min_by(|&a, &b| {
                    let da = (&p - &cent.row(a)).mapv(|v| v * v).sum();
                    let db = (&p - &cent.row(b)).mapv(|v| v * v).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
        }
        if before == assign {
            break;
        }
        for k in 0..c {
            let members: Vec<usize> = (0..n).filter(|&i| assign[i] == k).collect();
            if !members.is_empty() {
                cent.row_mut(k).assign(&points.select(ndarray::Axis(0), &members).mean_axis(ndarray::Axis(0)).unwrap());
            }
        }
    }
    inertia_of(points, &cent, &assign)
}

fn brute_force_accuracy(assign: &[usize], labels: &[usize], classes: usize) -> f64 {
    (0..classes)
        .permutations(classes)
        .map(|perm| assign.iter().zip(labels).filter(|(&a, &l)| perm[a] == l).count())
        .max()
        .unwrap() as f64
        / assign.len() as f64
}

#[test]
fn separated_blobs_cluster_perfectly() {
    let mut r = rng(0);
    let mut pts = uniform(40, 2, &mut r).mapv(|v| v * 0.1);
    for i in 20..40 {
        pts[[i, 0]] += 10.0;
    }
    let c = kmeans(pts.view(), 2, 0).unwrap();
    assert_eq!(hungarian_accuracy(&c.assignments, &(0..40).map(|i| i / 20).collect::<Vec<_>>()).unwrap(), 1.0);
    let within: f64 = (0..2)
        .map(|b| {
            let blob = pts.slice(ndarray::s![b * 20..(b + 1) * 20, ..]);
            let mean = blob.mean_axis(ndarray::Axis(0)).unwrap();
            blob.rows().into_iter().map(|p| (&p - &mean).mapv(|v| v * v).sum()).sum::<f64>()
        })
        .sum();
    assert!((c.inertia - within).abs() < 1e-9);
}

#[test]
fn as_many_clusters_as_points_has_zero_inertia() {
    let pts = uniform(12, 3, &mut rng(2));
    assert_eq!(kmeans(pts.view(), 12, 0).unwrap().inertia, 0.0);
    assert!(matches!(kmeans(pts.view(), 13, 0), Err(SparcError::Domain(_))));
}

#[test]
fn kmeans_is_near_the_best_of_many_restarts() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let pts = uniform(50, 2, &mut r);
        let best = (0..100).map(|_| reference_lloyd(pts.view(), 3, &mut r)).fold(f64::INFINITY, f64::min);
        let got = kmeans(pts.view(), 3, seed).unwrap();
        assert!(got.inertia <= best * 1.05, "{} vs {best}", got.inertia);
        assert!((got.inertia - inertia_of(pts.view(), &got.centroids, &got.assignments)).abs() < 1e-9);
    }
}

#[test]
fn hungarian_equals_brute_force_over_permutations() {
    let mut r = rng(3);
    for _ in 0..200 {
        let assign: Vec<usize> = (0..20).map(|_| r.random_range(0..4)).collect();
        let labels: Vec<usize> = (0..20).map(|_| r.random_range(0..4)).collect();
        let got = hungarian_accuracy(&assign, &labels).unwrap();
        assert!((got - brute_force_accuracy(&assign, &labels, 4)).abs() < 1e-12);
    }
    assert!(matches!(hungarian_accuracy(&[], &[]), Err(SparcError::Domain(_))));
}

#[test]
fn clique_sized_spectral_batches_are_the_cliques() {
    let g = two_cliques(15, 0).unwrap();
    let u = exact_spectral_embedding(&sym_normalized_laplacian(&g), 2).unwrap().embedding.values;
    let plan = spectral_minibatches(u.view(), 15, 0).unwrap();
    let mut batches = plan.batches.clone();
    batches.sort();
    assert_eq!(batches, vec![(0..15).collect::<Vec<_>>(), (15..30).collect()]);
    assert_eq!(intra_batch_edge_fraction(&plan, &g).unwrap(), 1.0);
}

#[test]
fn random_plans_chunk_and_reproduce() {
    let one = random_minibatches(10, 10, 0).unwrap();
    assert_eq!(one.batches.len(), 1);
    let a = random_minibatches(23, 5, 1).unwrap();
    assert_eq!(a, random_minibatches(23, 5, 1).unwrap());
    assert_ne!(a, random_minibatches(23, 5, 2).unwrap());
    let sizes: Vec<usize> = a.batches.iter().map(Vec::len).collect();
    assert_eq!(sizes, vec![5, 5, 5, 5, 3]);
    assert_eq!(a.method, BatchMethod::Random);
}

#[test]
fn edge_fraction_matches_brute_force_scan() {
    let mut r = rng(5);
    let n = 60;
    let g = Graph::from_edges(uniform(n, 2, &mut r), random_connected_edges(n, 90, &mut r), None).unwrap();
    let plan = random_minibatches(n, 7, 4).unwrap();
    let dense = g.adjacency().to_dense();
    let same = |i: usize, j: usize| plan.batches.iter().any(|b| b.contains(&i) && b.contains(&j));
    let (mut inside, mut total) = (0, 0);
    for i in 0..n {
        for j in (i + 1)..n {
            if dense[[i, j]] != 0.0 {
                total += 1;
                inside += usize::from(same(i, j));
            }
        }
    }
    assert_eq!(intra_batch_edge_fraction(&plan, &g).unwrap(), inside as f64 / total as f64);
    let singletons = BatchPlan { method: BatchMethod::Random, batches: (0..n).map(|i| vec![i]).collect() };
    assert_eq!(intra_batch_edge_fraction(&singletons, &g).unwrap(), 0.0);
    let broken = BatchPlan { method: BatchMethod::Random, batches: vec![(0..n - 1).collect()] };
    assert!(matches!(intra_batch_edge_fraction(&broken, &g), Err(SparcError::Invariant(_))));
}

#[test]
fn spectral_batches_beat_random_on_block_models() {
    let mut wins = 0;
    for seed in 0..10 {
        let g = sbm(&SbmConfig { n: 200, blocks: 4, ..SbmConfig::two_block_fixture() }, seed).unwrap();
        let u = exact_spectral_embedding(&sym_normalized_laplacian(&g), 4).unwrap().embedding.values;
        let s = intra_batch_edge_fraction(&spectral_minibatches(u.view(), 50, seed).unwrap(), &g).unwrap();
        let r = intra_batch_edge_fraction(&random_minibatches(200, 50, seed).unwrap(), &g).unwrap();
        wins += usize::from(s > r);
    }
    assert!(wins >= 6, "spectral ahead in {wins} of 10 seeds");
}

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn hungarian_ignores_cluster_relabeling(
        labels in proptest::collection::vec(0usize..5, 1..30),
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let assign: Vec<usize> = labels.iter().map(|&l| if r.random_bool(0.7) { l } else { r.random_range(0..5) }).collect();
        let mut perm: Vec<usize> = (0..5).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
        let relabeled: Vec<usize> = assign.iter().map(|&a| perm[a]).collect();
        prop_assert_eq!(hungarian_accuracy(&assign, &labels).unwrap(), hungarian_accuracy(&relabeled, &labels).unwrap());
        prop_assert!((hungarian_accuracy(&assign, &labels).unwrap() - brute_force_accuracy(&assign, &labels, 5)).abs() < 1e-12);
    }

    #[test]
    fn lloyd_inertia_never_rises(n in 3usize..60, c in 1usize..6, seed in any::<u64>()) {
        prop_assume!(c <= n);
        let pts = uniform(n, 3, &mut rng(seed));
        let cl = kmeans(pts.view(), c, seed).unwrap();
        prop_assert!(cl.inertia_history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        prop_assert!(cl.assignments.iter().all(|&a| a < c));
    }

    #[test]
    fn plans_partition_the_nodes(n in 1usize..80, m in 1usize..30, seed in any::<u64>()) {
        prop_assume!(m <= n);
        let pts = uniform(n, 2, &mut rng(seed));
        let s = spectral_minibatches(pts.view(), m, seed).unwrap();
        prop_assert!(s.check_partition(n).is_ok());
        prop_assert!(s.batches.iter().all(|b| b.len() <= m));
        prop_assert!(random_minibatches(n, m, seed).unwrap().check_partition(n).is_ok());
    }
}
