//! Property tests over the data-handling and metric invariants.

use cgir_core::adversarial::extend_assignment;
use cgir_core::evaluation::cluster_metrics;
use cgir_core::graph::{
    apply_missing_mask, generate_sbm, load_graph, normalize_adjacency, save_graph, MissingMask,
};
use cgir_core::subcluster::soft_assignment;
use ndarray::Array2;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mask_counts_and_untouched_rows(
        n in 1usize..120,
        ratio in 0.0f64..0.95,
        seed in 0u64..500,
    ) {
        let ratio = ratio.min(0.9499);
        let mask = MissingMask::generate(n, ratio, seed).unwrap();
        let expected = (n as f64 * ratio).round() as usize;
        prop_assert_eq!(mask.n_missing(), expected);
        prop_assert_eq!(mask.n_available() + mask.n_missing(), n);
        // regeneration is identical
        let again = MissingMask::generate(n, ratio, seed).unwrap();
        prop_assert_eq!(&mask, &again);
    }

    #[test]
    fn masking_never_touches_available_rows(
        seed in 0u64..200,
        ratio in 0.0f64..0.9,
    ) {
        let graph = generate_sbm(24, 2, 0.4, 0.1, 3, 1.0, seed).unwrap();
        let (x, mask) = apply_missing_mask(&graph, ratio, seed).unwrap();
        for (i, &avail) in mask.h.iter().enumerate() {
            if avail {
                prop_assert_eq!(x.row(i), graph.x.row(i));
            } else {
                prop_assert!(x.row(i).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn graph_roundtrip_reproduces_everything(seed in 0u64..200) {
        let graph = generate_sbm(16, 2, 0.5, 0.1, 4, 1.3, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let e = dir.path().join("e.txt");
        let x = dir.path().join("x.csv");
        let y = dir.path().join("y.txt");
        save_graph(&graph, &e, &x, Some(&y)).unwrap();
        let back = load_graph(&e, &x, Some(&y)).unwrap();
        prop_assert_eq!(back.x, graph.x);
        prop_assert_eq!(back.g, graph.g);
        prop_assert_eq!(back.labels, graph.labels);
    }

    #[test]
    fn normalized_adjacency_is_symmetric_with_self_loops(seed in 0u64..200) {
        let graph = generate_sbm(20, 2, 0.4, 0.1, 3, 1.0, seed).unwrap();
        let a = normalize_adjacency(&graph.g).unwrap();
        prop_assert!(a.is_symmetric(1e-12));
        for i in 0..graph.n {
            prop_assert!(a.get(i, i) > 0.0);
        }
    }

    #[test]
    fn soft_assignment_rows_stay_on_the_simplex(seed in 0u64..200) {
        let graph = generate_sbm(18, 3, 0.4, 0.1, 4, 2.0, seed).unwrap();
        let centroids = Array2::from_shape_fn((5, 4), |(i, j)| (i as f64) - (j as f64) * 0.5);
        let p = soft_assignment(&graph.x, &centroids);
        for row in p.rows() {
            prop_assert!((row.sum() - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
        let ext = extend_assignment(&p);
        for row in ext.rows() {
            prop_assert!((row.sum() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn metrics_invariant_under_relabeling(
        seed in 0u64..300,
        n in 6usize..60,
        c in 2usize..5,
    ) {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let base = cluster_metrics(&pred, &truth).unwrap();
        let mut perm_p: Vec<usize> = (0..c).collect();
        let mut perm_t: Vec<usize> = (0..c).collect();
        perm_p.shuffle(&mut rng);
        perm_t.shuffle(&mut rng);
        let pred2: Vec<usize> = pred.iter().map(|&l| perm_p[l]).collect();
        let truth2: Vec<usize> = truth.iter().map(|&l| perm_t[l]).collect();
        let other = cluster_metrics(&pred2, &truth2).unwrap();
        prop_assert!((base.acc - other.acc).abs() <= 1e-12);
        prop_assert!((base.nmi - other.nmi).abs() <= 1e-12);
        prop_assert!((base.ari - other.ari).abs() <= 1e-12);
        prop_assert!((base.f1 - other.f1).abs() <= 1e-12);
    }
}
