//! Synthetic text-attributed graphs with planted heterophily.
//!
//! Three knobs realize the three patterns: `partial_mix` puts foreign-class
//! words into each node's token set, `complete_noise_frac` replaces some nodes'
//! text with isotropic noise, and `latent_drop_frac` deletes same-class edges
//! after sampling while recording them as ground truth for recovery.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{
    load_graph, load_labels, write_graph, write_labels,
    EmbeddingMatrix, Graph, RaggedEmbeddingSet,
};
use crate::error::{Error, Result};
use crate::losses::Bundle;

pub const MIN_TOKENS: usize = 3;
pub const MAX_TOKENS: usize = 8;
/// Bound on `|cos|` between any two class centroids.
pub const MAX_CENTROID_COSINE: f64 = 0.3;
const CENTROID_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_nodes: usize,
    pub num_classes: usize,
    pub dim: usize,
    pub intra_edge_prob: f64,
    pub inter_edge_prob: f64,
    /// Fraction of each token set copied from other classes' centroids.
    pub partial_mix: f64,
    /// Fraction of nodes whose text is pure noise.
    pub complete_noise_frac: f64,
    /// Fraction of same-class edges deleted after sampling.
    pub latent_drop_frac: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_nodes: 60,
            num_classes: 3,
            dim: 16,
            intra_edge_prob: 0.2,
            inter_edge_prob: 0.05,
            partial_mix: 0.3,
            complete_noise_frac: 0.1,
            latent_drop_frac: 0.3,
            noise_sigma: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_nodes == 0 || self.num_classes == 0 || self.dim == 0 {
            return Err(Error::validation("num_nodes, num_classes and dim must be positive"));
        }
        if self.num_classes > self.num_nodes {
            return Err(Error::validation(format!(
                "num_classes {} exceeds num_nodes {}",
                self.num_classes, self.num_nodes
            )));
        }
        for (name, v) in [
            ("intra_edge_prob", self.intra_edge_prob),
            ("inter_edge_prob", self.inter_edge_prob),
            ("partial_mix", self.partial_mix),
            ("complete_noise_frac", self.complete_noise_frac),
            ("latent_drop_frac", self.latent_drop_frac),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::validation(format!("noise_sigma must be non-negative, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// Ground truth left behind by generation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Planted {
    /// Same-class edges removed from the graph, `(min, max)`, ascending.
    pub deleted_edges: Vec<(usize, usize)>,
    /// Nodes whose tokens are isotropic noise, ascending.
    pub noise_nodes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTag {
    pub graph: Graph,
    pub h_struct: EmbeddingMatrix,
    pub h_text: EmbeddingMatrix,
    /// Node itself first, then its neighbors in ascending id order.
    pub neighborhoods: RaggedEmbeddingSet,
    pub tokens: RaggedEmbeddingSet,
    pub planted: Planted,
}

fn isotropic(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    let scale = 1.0 / (dim as f64).sqrt();
    Array1::from_shape_fn(dim, |_| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

fn centroids(rng: &mut ChaCha8Rng, classes: usize, dim: usize) -> Result<Vec<Array1<f64>>> {
    let mut out: Vec<Array1<f64>> = Vec::with_capacity(classes);
    let mut attempts = 0;
    while out.len() < classes {
        attempts += 1;
        if attempts > CENTROID_ATTEMPTS {
            return Err(Error::Generation(format!(
                "could not place {classes} centroids with |cos| <= {MAX_CENTROID_COSINE} in {dim} dimensions; \
                 increase dim"
            )));
        }
        let v = isotropic(rng, dim);
        let norm = v.dot(&v).sqrt();
        if norm == 0.0 {
            continue;
        }
        let v = v / norm;
        if out.iter().all(|c| c.dot(&v).abs() <= MAX_CENTROID_COSINE) {
            out.push(v);
        }
    }
    Ok(out)
}

/// Node `i` first, then its neighbors' structural rows.
pub fn neighborhood_sets(g: &Graph, h_struct: &Array2<f64>) -> Vec<Array2<f64>> {
    g.adjacency()
        .iter()
        .enumerate()
        .map(|(i, nb)| {
            let mut idx = Vec::with_capacity(nb.len() + 1);
            idx.push(i);
            idx.extend(nb.iter().copied());
            h_struct.select(Axis(0), &idx)
        })
        .collect()
}

pub fn generate(cfg: &SynthConfig) -> Result<SyntheticTag> {
    cfg.validate()?;
    let n = cfg.num_nodes;
    let d = cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::validation(e.to_string()))?;

    let labels: Vec<usize> = (0..n).map(|i| i % cfg.num_classes).collect();
    let cents = centroids(&mut rng, cfg.num_classes, d)?;

    let mut h_struct = Array2::zeros((n, d));
    for (i, mut row) in h_struct.rows_mut().into_iter().enumerate() {
        row.assign(&cents[labels[i]]);
        row.mapv_inplace(|v| v + noise.sample(&mut rng));
    }

    let n_noise = (cfg.complete_noise_frac * n as f64).round() as usize;
    let mut noise_nodes = sample(&mut rng, n, n_noise).into_vec();
    noise_nodes.sort_unstable();
    let mut is_noise = vec![false; n];
    for &i in &noise_nodes {
        is_noise[i] = true;
    }

    let mut tokens = Vec::with_capacity(n);
    for i in 0..n {
        let w = rng.random_range(MIN_TOKENS..=MAX_TOKENS);
        let mut set = Array2::zeros((w, d));
        if is_noise[i] {
            for mut row in set.rows_mut() {
                row.assign(&isotropic(&mut rng, d));
            }
        } else {
            let foreign = (cfg.partial_mix * w as f64).round() as usize;
            for (k, mut row) in set.rows_mut().into_iter().enumerate() {
                let class = if k < foreign && cfg.num_classes > 1 {
                    let other = rng.random_range(0..cfg.num_classes - 1);
                    if other >= labels[i] {
                        other + 1
                    } else {
                        other
                    }
                } else {
                    labels[i]
                };
                row.assign(&cents[class]);
                row.mapv_inplace(|v| v + noise.sample(&mut rng));
            }
        }
        tokens.push(set);
    }
    let h_text = Array2::from_shape_fn((n, d), |(i, k)| tokens[i].column(k).mean().expect("non-empty"));

    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if labels[u] == labels[v] {
                cfg.intra_edge_prob
            } else {
                cfg.inter_edge_prob
            };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let same: Vec<usize> = (0..edges.len()).filter(|&k| labels[edges[k].0] == labels[edges[k].1]).collect();
    let n_drop = (cfg.latent_drop_frac * same.len() as f64).round() as usize;
    let mut dropped: Vec<usize> = sample(&mut rng, same.len(), n_drop).into_iter().map(|k| same[k]).collect();
    dropped.sort_unstable();
    let mut deleted_edges = Vec::with_capacity(n_drop);
    let mut kept = Vec::with_capacity(edges.len() - n_drop);
    let mut next = dropped.iter().peekable();
    for (k, e) in edges.into_iter().enumerate() {
        if next.peek() == Some(&&k) {
            next.next();
            deleted_edges.push(e);
        } else {
            kept.push(e);
        }
    }
    if kept.is_empty() {
        return Err(Error::Generation(
            "generated graph has no edges; raise intra_edge_prob or inter_edge_prob".into(),
        ));
    }

    let graph = Graph::new(n, kept)?.with_labels(labels)?;
    let neighborhoods = neighborhood_sets(&graph, &h_struct);
    Ok(SyntheticTag {
        graph,
        h_struct: EmbeddingMatrix::new(h_struct)?,
        h_text: EmbeddingMatrix::new(h_text)?,
        neighborhoods: RaggedEmbeddingSet::new(neighborhoods)?,
        tokens: RaggedEmbeddingSet::new(tokens)?,
        planted: Planted {
            deleted_edges,
            noise_nodes,
        },
    })
}

pub const EDGES_FILE: &str = "edges.tsv";
pub const LABELS_FILE: &str = "labels.csv";
pub const PLANTED_FILE: &str = "planted.json";

impl SyntheticTag {
    pub fn to_bundle(&self) -> Bundle {
        Bundle {
            h_struct: self.h_struct.values().clone(),
            h_text: self.h_text.values().clone(),
            neigh: self.neighborhoods.as_slice().to_vec(),
            tokens: self.tokens.as_slice().to_vec(),
        }
    }

    /// Writes the bundle files into `dir`, creating it if needed.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_graph(dir.join(EDGES_FILE), &self.graph)?;
        write_labels(dir.join(LABELS_FILE), self.graph.require_labels()?)?;
        self.to_bundle().write(dir)?;
        let planted = dir.join(PLANTED_FILE);
        let json = serde_json::to_string_pretty(&self.planted)?;
        fs::write(&planted, json + "\n").map_err(|e| Error::io(&planted, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let bundle = Bundle::load(dir)?;
        let n = bundle.n();
        let labels = load_labels(dir.join(LABELS_FILE), n)?;
        let graph = load_graph(dir.join(EDGES_FILE), Some(n))?.with_labels(labels)?;
        let planted_path = dir.join(PLANTED_FILE);
        let text = fs::read_to_string(&planted_path).map_err(|e| Error::io(&planted_path, e))?;
        let planted: Planted = serde_json::from_str(&text)?;
        if planted.deleted_edges.iter().any(|&(u, v)| u >= n || v >= n) || planted.noise_nodes.iter().any(|&i| i >= n)
        {
            return Err(Error::validation("planted record refers to nodes outside the graph"));
        }
        Ok(SyntheticTag {
            graph,
            h_struct: EmbeddingMatrix::new(bundle.h_struct)?,
            h_text: EmbeddingMatrix::new(bundle.h_text)?,
            neighborhoods: RaggedEmbeddingSet::new(bundle.neigh)?,
            tokens: RaggedEmbeddingSet::new(bundle.tokens)?,
            planted,
        })
    }
}

/// Removes `|delta|` uniformly chosen edges (`delta < 0`) or adds `delta`
/// uniformly chosen non-edges (`delta > 0`).
pub fn perturb_edges(g: &Graph, delta: i64, seed: u64) -> Result<Graph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = delta.unsigned_abs() as usize;
    if delta <= 0 {
        if k > g.num_edges() {
            return Err(Error::Range(format!("cannot remove {k} of {} edges", g.num_edges())));
        }
        let mut gone = sample(&mut rng, g.num_edges(), k).into_vec();
        gone.sort_unstable();
        let kept = g
            .edges()
            .iter()
            .enumerate()
            .filter(|(i, _)| gone.binary_search(i).is_err())
            .map(|(_, &e)| e);
        return g.with_edges(kept);
    }
    let n = g.num_nodes();
    let free = n * n.saturating_sub(1) / 2 - g.num_edges();
    if k > free {
        return Err(Error::Range(format!("cannot add {k} edges: only {free} non-edges")));
    }
    let mut added = std::collections::BTreeSet::new();
    if 2 * k <= free {
        while added.len() < k {
            let a = rng.random_range(0..n);
            let mut b = rng.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            let e = (a.min(b), a.max(b));
            if !g.has_edge(e.0, e.1) {
                added.insert(e);
            }
        }
    } else {
        let mut non_edges = Vec::with_capacity(free);
        for u in 0..n {
            for v in u + 1..n {
                if !g.has_edge(u, v) {
                    non_edges.push((u, v));
                }
            }
        }
        added.extend(sample(&mut rng, free, k).into_iter().map(|i| non_edges[i]));
    }
    g.with_edges(g.edges().iter().copied().chain(added))
}

/// On a `node_frac` share of nodes, removes `⌊|word_frac|·W⌋` token vectors
/// (keeping at least one) or appends as many isotropic noise vectors.
pub fn perturb_tokens(
    tokens: &RaggedEmbeddingSet,
    node_frac: f64,
    word_frac: f64,
    seed: u64,
) -> Result<RaggedEmbeddingSet> {
    if !(0.0..=1.0).contains(&node_frac) {
        return Err(Error::Range(format!("node_frac must lie in [0, 1], got {node_frac}")));
    }
    if !(-1.0..=1.0).contains(&word_frac) {
        return Err(Error::Range(format!("word_frac must lie in [-1, 1], got {word_frac}")));
    }
    let n = tokens.len();
    let d = tokens.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = sample(&mut rng, n, (node_frac * n as f64).round() as usize).into_vec();
    chosen.sort_unstable();

    let mut sets = tokens.as_slice().to_vec();
    for i in chosen {
        let w = sets[i].nrows();
        // the epsilon keeps e.g. 0.3·10 from flooring to 2
        let k = (word_frac.abs() * w as f64 + 1e-9).floor() as usize;
        if word_frac < 0.0 {
            let k = k.min(w - 1);
            let mut keep: Vec<usize> = sample(&mut rng, w, w - k).into_vec();
            keep.sort_unstable();
            sets[i] = sets[i].select(Axis(0), &keep);
        } else if k > 0 {
            let mut grown = Array2::zeros((w + k, d));
            grown.slice_mut(ndarray::s![..w, ..]).assign(&sets[i]);
            for r in w..w + k {
                grown.row_mut(r).assign(&isotropic(&mut rng, d));
            }
            sets[i] = grown;
        }
    }
    RaggedEmbeddingSet::new(sets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::edge_homophily;

    fn clean(seed: u64) -> SynthConfig {
        SynthConfig {
            num_nodes: 30,
            partial_mix: 0.0,
            complete_noise_frac: 0.0,
            latent_drop_frac: 0.0,
            inter_edge_prob: 0.0,
            noise_sigma: 0.0,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn intra_only_is_fully_homophilous() {
        let t = generate(&clean(1)).unwrap();
        assert_eq!(edge_homophily(&t.graph).unwrap(), 1.0);
    }

    #[test]
    fn inter_only_is_fully_heterophilous() {
        let cfg = SynthConfig {
            intra_edge_prob: 0.0,
            inter_edge_prob: 0.3,
            ..clean(2)
        };
        assert_eq!(edge_homophily(&generate(&cfg).unwrap().graph).unwrap(), 0.0);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig {
            latent_drop_frac: 0.5,
            seed: 7,
            ..SynthConfig::default()
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
    }

    #[test]
    fn planted_edges_are_removed_same_class_edges() {
        let cfg = SynthConfig {
            latent_drop_frac: 0.5,
            seed: 3,
            ..SynthConfig::default()
        };
        let t = generate(&cfg).unwrap();
        let labels = t.graph.labels().unwrap();
        assert!(!t.planted.deleted_edges.is_empty());
        for &(u, v) in &t.planted.deleted_edges {
            assert_eq!(labels[u], labels[v]);
            assert!(!t.graph.has_edge(u, v));
        }
        assert_eq!(t.planted.noise_nodes.len(), 6);
    }

    #[test]
    fn neighborhoods_start_with_self() {
        let t = generate(&SynthConfig::default()).unwrap();
        for i in 0..t.graph.num_nodes() {
            assert_eq!(t.neighborhoods.get(i).row(0), t.h_struct.row(i));
        }
        let degrees = t.graph.degrees();
        assert!((0..30).all(|i| t.neighborhoods.get(i).nrows() == degrees[i] + 1));
    }

    #[test]
    fn no_edges_is_a_generation_error() {
        let cfg = SynthConfig {
            intra_edge_prob: 0.0,
            ..clean(0)
        };
        assert!(matches!(generate(&cfg), Err(Error::Generation(_))));
    }

    fn triangle() -> Graph {
        Graph::new(3, [(0, 1), (0, 2), (1, 2)]).unwrap()
    }

    #[test]
    fn edge_perturbation_cases() {
        assert_eq!(perturb_edges(&triangle(), 0, 1).unwrap(), triangle());
        assert_eq!(perturb_edges(&triangle(), -3, 1).unwrap().num_edges(), 0);
        assert!(matches!(perturb_edges(&triangle(), 1, 1), Err(Error::Range(_))));
        assert!(matches!(perturb_edges(&triangle(), -4, 1), Err(Error::Range(_))));
        let path = Graph::new(4, [(0, 1)]).unwrap();
        let grown = perturb_edges(&path, 5, 9).unwrap();
        assert_eq!(grown.num_edges(), 6);
    }

    fn four_tokens() -> RaggedEmbeddingSet {
        RaggedEmbeddingSet::new(vec![Array2::from_shape_fn((4, 2), |(r, c)| (r * 2 + c) as f64)]).unwrap()
    }

    #[test]
    fn token_perturbation_cases() {
        let t = four_tokens();
        assert_eq!(perturb_tokens(&t, 0.0, -1.0, 0).unwrap(), t);
        assert_eq!(perturb_tokens(&t, 1.0, -1.0, 0).unwrap().get(0).nrows(), 1);
        let grown = perturb_tokens(&t, 1.0, 1.0, 0).unwrap();
        assert_eq!(grown.get(0).nrows(), 8);
        assert_eq!(grown.get(0).slice(ndarray::s![..4, ..]), t.get(0));
        assert!(perturb_tokens(&t, 1.5, 0.0, 0).is_err());
    }

    #[test]
    fn bundle_round_trip() {
        let t = generate(&SynthConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        t.write(dir.path()).unwrap();
        let back = SyntheticTag::load(dir.path()).unwrap();
        assert_eq!(back.graph, t.graph);
        assert_eq!(back.planted, t.planted);
        assert_eq!(back.h_struct, t.h_struct);
        assert_eq!(back.tokens, t.tokens);
    }
}
