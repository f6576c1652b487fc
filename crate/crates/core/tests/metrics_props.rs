use ndarray::Array2;
use proptest::prelude::*;

use tagalign::data::{EmbeddingMatrix, Graph};
use tagalign::metrics::{
    metric_report, neighborhood_label_profile, unconnected_text_similarity, MetricInputs, PairSampling,
};

fn labeled_graph() -> impl Strategy<Value = Graph> {
    (2usize..20, 1usize..5).prop_flat_map(|(n, c)| {
        let pair = (0..n, 0..n).prop_filter("no self-loops", |(u, v)| u != v);
        (prop::collection::vec(pair, 1..40), prop::collection::vec(0..c, n))
            .prop_map(move |(edges, labels)| Graph::new(n, edges).unwrap().with_labels(labels).unwrap())
    })
}

fn sentences(n: usize, vals: &[f64]) -> EmbeddingMatrix {
    EmbeddingMatrix::new(Array2::from_shape_fn((n, 3), |(i, k)| vals[(i * 3 + k) % vals.len()] + 1e-3)).unwrap()
}

proptest! {
    #[test]
    fn profile_partitions_non_isolated_nodes(g in labeled_graph()) {
        let p = neighborhood_label_profile(&g).unwrap();
        prop_assert!((p.r_nys + p.r_nyd + p.r_nym - 1.0).abs() <= 1e-12);
        let isolated = g.degrees().iter().filter(|&&d| d == 0).count();
        prop_assert_eq!(p.isolated_nodes, isolated);
    }

    #[test]
    fn relabeling_classes_changes_nothing(g in labeled_graph(), shift in 1usize..7) {
        let labels = g.labels().unwrap();
        let classes = labels.iter().max().unwrap() + 1;
        // a bijection on class ids: rotate, then move to a disjoint range
        let relabeled: Vec<usize> = labels.iter().map(|&l| 100 + (l + shift) % classes).collect();
        let h = g.clone().with_labels(relabeled).unwrap();
        let a = metric_report(&MetricInputs::new(&g));
        let b = metric_report(&MetricInputs::new(&h));
        prop_assert_eq!(a.values(), b.values());
    }

    #[test]
    fn full_sample_equals_exact(g in labeled_graph(), vals in prop::collection::vec(-1.0f64..1.0, 60), seed in any::<u64>()) {
        let s = sentences(g.num_nodes(), &vals);
        let n = g.num_nodes();
        let non_edges = n * (n - 1) / 2 - g.num_edges();
        prop_assume!(non_edges > 0);
        let exact = unconnected_text_similarity(&g, &s, 0.5, &PairSampling::default()).unwrap();
        let sampled = unconnected_text_similarity(
            &g,
            &s,
            0.5,
            &PairSampling { exact_threshold: 0, sample_size: non_edges, seed },
        )
        .unwrap();
        prop_assert_eq!(exact.value, sampled.value);
        prop_assert_eq!(sampled.pairs_used, non_edges);
    }

    #[test]
    fn sampled_estimate_is_seeded(g in labeled_graph(), vals in prop::collection::vec(-1.0f64..1.0, 60), seed in any::<u64>()) {
        let s = sentences(g.num_nodes(), &vals);
        let n = g.num_nodes();
        let non_edges = n * (n - 1) / 2 - g.num_edges();
        prop_assume!(non_edges > 2);
        let sampling = PairSampling { exact_threshold: 0, sample_size: non_edges - 1, seed };
        let a = unconnected_text_similarity(&g, &s, 0.5, &sampling).unwrap();
        let b = unconnected_text_similarity(&g, &s, 0.5, &sampling).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(a.sample_seed, Some(seed));
        prop_assert!((0.0..=1.0).contains(&a.value));
    }
}
