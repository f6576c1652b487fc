use ndarray::Array2;
use proptest::prelude::*;
use tempfile::TempDir;

use tagalign::data::{
    load_graph, load_labels, load_matrix, load_ragged, write_graph, write_labels, write_matrix, write_ragged, Graph,
    RaggedEmbeddingSet,
};

fn edges_strategy() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    (2usize..15).prop_flat_map(|n| {
        let pair = (0..n, 0..n).prop_filter("no self-loops", |(u, v)| u != v);
        (Just(n), prop::collection::vec(pair, 0..30))
    })
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-1e3..1e3, -1e-8..1e-8, prop::num::f64::NORMAL]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn graph_round_trip((n, pairs) in edges_strategy(), labels_seed in any::<u64>()) {
        let labels: Vec<usize> = (0..n).map(|i| ((labels_seed >> (i % 60)) & 3) as usize).collect();
        let g = Graph::new(n, pairs).unwrap().with_labels(labels.clone()).unwrap();
        let dir = TempDir::new().unwrap();
        write_graph(dir.path().join("e.tsv"), &g).unwrap();
        write_labels(dir.path().join("l.csv"), &labels).unwrap();
        let back = load_graph(dir.path().join("e.tsv"), Some(n)).unwrap();
        let back_labels = load_labels(dir.path().join("l.csv"), n).unwrap();
        prop_assert_eq!(back.with_labels(back_labels).unwrap(), g);
    }

    #[test]
    fn edge_order_does_not_matter((n, pairs) in edges_strategy(), rot in 0usize..30) {
        let dir = TempDir::new().unwrap();
        let line = |&(u, v): &(usize, usize)| format!("{u}\t{v}\n");
        let forward: String = pairs.iter().map(line).collect();
        let mut shuffled = pairs.clone();
        shuffled.reverse();
        if !shuffled.is_empty() {
            let k = rot % shuffled.len();
            shuffled.rotate_left(k);
        }
        // flipped endpoints describe the same undirected edge
        let backward: String = shuffled.iter().map(|&(u, v)| format!("{v}\t{u}\n")).collect();
        std::fs::write(dir.path().join("a.tsv"), forward).unwrap();
        std::fs::write(dir.path().join("b.tsv"), backward).unwrap();
        let a = load_graph(dir.path().join("a.tsv"), Some(n)).unwrap();
        let b = load_graph(dir.path().join("b.tsv"), Some(n)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn matrix_round_trip_is_bitwise(rows in 1usize..6, cols in 1usize..6, vals in prop::collection::vec(finite(), 36)) {
        let m = Array2::from_shape_fn((rows, cols), |(i, j)| vals[i * 6 + j]);
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("m.csv");
        write_matrix(&p, m.view()).unwrap();
        let back = load_matrix(&p, Some(rows)).unwrap();
        prop_assert!(back.values().iter().zip(m.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn ragged_round_trip_is_bitwise(
        sizes in prop::collection::vec(1usize..5, 1..6),
        dim in 1usize..4,
        vals in prop::collection::vec(finite(), 80),
    ) {
        let mut k = 0;
        let sets: Vec<Array2<f64>> = sizes
            .iter()
            .map(|&w| {
                Array2::from_shape_fn((w, dim), |_| {
                    k += 1;
                    vals[k % vals.len()]
                })
            })
            .collect();
        let set = RaggedEmbeddingSet::new(sets).unwrap();
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("r.jsonl");
        write_ragged(&p, &set).unwrap();
        let back = load_ragged(&p).unwrap();
        prop_assert_eq!(back.len(), set.len());
        for (a, b) in back.iter().zip(set.iter()) {
            prop_assert_eq!(a.dim(), b.dim());
            prop_assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
