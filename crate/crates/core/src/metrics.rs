//! Homophily and text-agreement statistics of a labeled, text-attributed graph.
//!
//! Every statistic is a fraction. Nodes without neighbors are left out of the
//! node-level label statistics; [`MetricReport::isolated_nodes`] records how many.

use std::collections::{BTreeMap, HashSet};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingMatrix, Graph, RaggedEmbeddingSet};
use crate::error::{Error, Result};
use crate::similarity::row_norms;

pub const DEFAULT_PAIR_EXACT_THRESHOLD: usize = 2000;
pub const DEFAULT_PAIR_SAMPLE_SIZE: usize = 200_000;
pub const DEFAULT_UTS_THRESHOLD: f64 = 0.5;

/// Non-edge enumeration policy for graphs too large to enumerate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairSampling {
    /// Graphs with at most this many nodes are enumerated exactly.
    pub exact_threshold: usize,
    pub sample_size: usize,
    pub seed: u64,
}

impl Default for PairSampling {
    fn default() -> Self {
        PairSampling {
            exact_threshold: DEFAULT_PAIR_EXACT_THRESHOLD,
            sample_size: DEFAULT_PAIR_SAMPLE_SIZE,
            seed: 0,
        }
    }
}

fn undefined(msg: &str) -> Error {
    Error::UndefinedMetric(msg.to_string())
}

/// `H_N`: mean same-label fraction of each node's neighbors.
pub fn node_homophily(g: &Graph) -> Result<f64> {
    let labels = g.require_labels()?;
    let adj = g.adjacency();
    let mut total = 0.0;
    let mut counted = 0usize;
    for (i, nb) in adj.iter().enumerate() {
        if nb.is_empty() {
            continue;
        }
        let same = nb.iter().filter(|&&j| labels[j] == labels[i]).count();
        total += same as f64 / nb.len() as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(undefined("no node has a neighbor"));
    }
    Ok(total / counted as f64)
}

/// `H_E`: fraction of edges joining same-label endpoints.
pub fn edge_homophily(g: &Graph) -> Result<f64> {
    let labels = g.require_labels()?;
    if g.num_edges() == 0 {
        return Err(undefined("no edges"));
    }
    let same = g.edges().iter().filter(|(u, v)| labels[*u] == labels[*v]).count();
    Ok(same as f64 / g.num_edges() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodProfile {
    /// Every neighbor shares the node's label.
    pub r_nys: f64,
    /// No neighbor shares the node's label.
    pub r_nyd: f64,
    /// Both kinds of neighbor.
    pub r_nym: f64,
    pub isolated_nodes: usize,
}

pub fn neighborhood_label_profile(g: &Graph) -> Result<NeighborhoodProfile> {
    let labels = g.require_labels()?;
    let (mut same, mut diff, mut mixed, mut isolated) = (0usize, 0usize, 0usize, 0usize);
    for (i, nb) in g.adjacency().iter().enumerate() {
        if nb.is_empty() {
            isolated += 1;
            continue;
        }
        let s = nb.iter().filter(|&&j| labels[j] == labels[i]).count();
        match s {
            0 => diff += 1,
            s if s == nb.len() => same += 1,
            _ => mixed += 1,
        }
    }
    let counted = same + diff + mixed;
    if counted == 0 {
        return Err(undefined("no node has a neighbor"));
    }
    let c = counted as f64;
    Ok(NeighborhoodProfile {
        r_nys: same as f64 / c,
        r_nyd: diff as f64 / c,
        r_nym: mixed as f64 / c,
        isolated_nodes: isolated,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnconnectedLabelStats {
    /// Fraction of nodes with at least one non-adjacent node of the same label.
    pub r_unys: f64,
    /// Same-label fraction among non-adjacent pairs; `None` for a complete graph.
    pub r_ueys: Option<f64>,
}

/// Computed by counting per class, so no pair enumeration or sampling is needed
/// at any graph size.
pub fn unconnected_label_stats(g: &Graph) -> Result<UnconnectedLabelStats> {
    let labels = g.require_labels()?;
    let n = g.num_nodes();
    if n < 2 {
        return Err(Error::validation("unconnected-pair statistics need at least two nodes"));
    }
    let mut class_size: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *class_size.entry(l).or_default() += 1;
    }
    let mut same_nb = vec![0usize; n];
    let mut same_edges = 0usize;
    for &(u, v) in g.edges() {
        if labels[u] == labels[v] {
            same_nb[u] += 1;
            same_nb[v] += 1;
            same_edges += 1;
        }
    }
    let with_peer = (0..n)
        .filter(|&i| class_size[&labels[i]] - 1 > same_nb[i])
        .count();
    let pairs = n * (n - 1) / 2;
    let non_edges = pairs - g.num_edges();
    let same_pairs: usize = class_size.values().map(|&c| c * (c.saturating_sub(1)) / 2).sum();
    let r_ueys = (non_edges > 0).then(|| (same_pairs - same_edges) as f64 / non_edges as f64);
    Ok(UnconnectedLabelStats {
        r_unys: with_peer as f64 / n as f64,
        r_ueys,
    })
}

fn unit_rows(m: &Array2<f64>, which: &str) -> Result<Array2<f64>> {
    let norms = row_norms(m.view(), which)?;
    Ok(m / &norms.insert_axis(Axis(1)))
}

/// `R_NWD`: one minus the mean, over edges, of the average cosine between the
/// endpoints' token vectors (all token pairs weighted equally).
pub fn neighbor_token_dissimilarity(g: &Graph, tokens: &RaggedEmbeddingSet) -> Result<f64> {
    if tokens.len() != g.num_nodes() {
        return Err(Error::validation(format!(
            "token sets cover {} nodes, graph has {}",
            tokens.len(),
            g.num_nodes()
        )));
    }
    if g.num_edges() == 0 {
        return Err(undefined("no edges"));
    }
    // mean_{a,b} â·b̂ = (mean â)·(mean b̂)
    let centroids = tokens
        .iter()
        .enumerate()
        .map(|(i, set)| {
            let unit = unit_rows(set, &format!("token set of node {i}"))?;
            Ok(unit.mean_axis(Axis(0)).expect("token sets are non-empty"))
        })
        .collect::<Result<Vec<Array1<f64>>>>()?;
    let mean = g
        .edges()
        .iter()
        .map(|&(u, v)| centroids[u].dot(&centroids[v]))
        .sum::<f64>()
        / g.num_edges() as f64;
    Ok(1.0 - mean)
}

fn check_sentences(g: &Graph, sentences: &EmbeddingMatrix) -> Result<Array2<f64>> {
    if sentences.rows() != g.num_nodes() {
        return Err(Error::validation(format!(
            "sentence matrix has {} rows, graph has {} nodes",
            sentences.rows(),
            g.num_nodes()
        )));
    }
    unit_rows(sentences.values(), "sentence embedding")
}

fn unit_cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.dot(&b).clamp(-1.0, 1.0)
}

/// `R_NTD`: one minus the mean sentence cosine over edges.
pub fn neighbor_text_dissimilarity(g: &Graph, sentences: &EmbeddingMatrix) -> Result<f64> {
    let unit = check_sentences(g, sentences)?;
    if g.num_edges() == 0 {
        return Err(undefined("no edges"));
    }
    let mean = g
        .edges()
        .iter()
        .map(|&(u, v)| unit_cosine(unit.row(u), unit.row(v)))
        .sum::<f64>()
        / g.num_edges() as f64;
    Ok(1.0 - mean)
}

/// `(R_NWD, R_NTD)`.
pub fn text_dissimilarity(
    g: &Graph,
    tokens: &RaggedEmbeddingSet,
    sentences: &EmbeddingMatrix,
) -> Result<(f64, f64)> {
    Ok((
        neighbor_token_dissimilarity(g, tokens)?,
        neighbor_text_dissimilarity(g, sentences)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairEstimate {
    pub value: f64,
    pub pairs_used: usize,
    /// Present when the value came from a random sample of non-edges.
    pub sample_seed: Option<u64>,
}

/// `R_UTS`: fraction of non-adjacent pairs whose sentence cosine exceeds `threshold`.
pub fn unconnected_text_similarity(
    g: &Graph,
    sentences: &EmbeddingMatrix,
    threshold: f64,
    sampling: &PairSampling,
) -> Result<PairEstimate> {
    let unit = check_sentences(g, sentences)?;
    let n = g.num_nodes();
    if n < 2 {
        return Err(Error::validation("unconnected-pair statistics need at least two nodes"));
    }
    let non_edges = n * (n - 1) / 2 - g.num_edges();
    if non_edges == 0 {
        return Err(undefined("complete graph has no unconnected pairs"));
    }
    let above = |u: usize, v: usize| unit_cosine(unit.row(u), unit.row(v)) > threshold;

    if n <= sampling.exact_threshold || sampling.sample_size >= non_edges {
        let mut hits = 0usize;
        for u in 0..n {
            for v in u + 1..n {
                if !g.has_edge(u, v) && above(u, v) {
                    hits += 1;
                }
            }
        }
        return Ok(PairEstimate {
            value: hits as f64 / non_edges as f64,
            pairs_used: non_edges,
            sample_seed: None,
        });
    }
    if sampling.sample_size == 0 {
        return Err(Error::validation("pair sample size must be positive"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
    let mut seen = HashSet::with_capacity(sampling.sample_size);
    let mut hits = 0usize;
    while seen.len() < sampling.sample_size {
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        let (u, v) = (a.min(b), a.max(b));
        if g.has_edge(u, v) || !seen.insert((u, v)) {
            continue;
        }
        if above(u, v) {
            hits += 1;
        }
    }
    Ok(PairEstimate {
        value: hits as f64 / sampling.sample_size as f64,
        pairs_used: sampling.sample_size,
        sample_seed: Some(sampling.seed),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub h_n: Option<f64>,
    pub h_e: Option<f64>,
    pub r_nys: Option<f64>,
    pub r_nyd: Option<f64>,
    pub r_nym: Option<f64>,
    pub r_unys: Option<f64>,
    pub r_ueys: Option<f64>,
    pub r_nwd: Option<f64>,
    pub r_ntd: Option<f64>,
    pub r_uts: Option<f64>,
    /// Metric name to the reason it could not be computed.
    pub absent: BTreeMap<String, String>,
    pub isolated_nodes: usize,
    pub uts_threshold: f64,
    pub pair_sample_size: Option<usize>,
    pub seed: Option<u64>,
}

impl MetricReport {
    pub const NAMES: [&'static str; 10] = [
        "h_n", "h_e", "r_nys", "r_nyd", "r_nym", "r_unys", "r_ueys", "r_nwd", "r_ntd", "r_uts",
    ];

    pub fn values(&self) -> [(&'static str, Option<f64>); 10] {
        let v = [
            self.h_n, self.h_e, self.r_nys, self.r_nyd, self.r_nym, self.r_unys, self.r_ueys, self.r_nwd,
            self.r_ntd, self.r_uts,
        ];
        std::array::from_fn(|k| (Self::NAMES[k], v[k]))
    }

    pub fn present_count(&self) -> usize {
        self.values().iter().filter(|(_, v)| v.is_some()).count()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MetricInputs<'a> {
    pub graph: &'a Graph,
    pub tokens: Option<&'a RaggedEmbeddingSet>,
    pub sentences: Option<&'a EmbeddingMatrix>,
    pub uts_threshold: f64,
    pub sampling: PairSampling,
}

impl<'a> MetricInputs<'a> {
    pub fn new(graph: &'a Graph) -> Self {
        MetricInputs {
            graph,
            tokens: None,
            sentences: None,
            uts_threshold: DEFAULT_UTS_THRESHOLD,
            sampling: PairSampling::default(),
        }
    }
}

/// Computes every statistic whose inputs are present. Failures become absent
/// entries with their reason instead of aborting the report.
pub fn metric_report(inp: &MetricInputs<'_>) -> MetricReport {
    let g = inp.graph;
    let mut absent = BTreeMap::new();
    let mut note = |names: &[&str], reason: String| {
        for name in names {
            absent.insert(name.to_string(), reason.clone());
        }
    };
    let reason = |e: Error| match e {
        Error::UndefinedMetric(m) => m,
        other => other.to_string(),
    };

    let mut r = MetricReport {
        h_n: None,
        h_e: None,
        r_nys: None,
        r_nyd: None,
        r_nym: None,
        r_unys: None,
        r_ueys: None,
        r_nwd: None,
        r_ntd: None,
        r_uts: None,
        absent: BTreeMap::new(),
        isolated_nodes: g.degrees().iter().filter(|&&d| d == 0).count(),
        uts_threshold: inp.uts_threshold,
        pair_sample_size: None,
        seed: None,
    };

    if g.labels().is_none() {
        note(&["h_n", "h_e", "r_nys", "r_nyd", "r_nym", "r_unys", "r_ueys"], "no labels".into());
    } else {
        match node_homophily(g) {
            Ok(v) => r.h_n = Some(v),
            Err(e) => note(&["h_n"], reason(e)),
        }
        match edge_homophily(g) {
            Ok(v) => r.h_e = Some(v),
            Err(e) => note(&["h_e"], reason(e)),
        }
        match neighborhood_label_profile(g) {
            Ok(p) => {
                r.r_nys = Some(p.r_nys);
                r.r_nyd = Some(p.r_nyd);
                r.r_nym = Some(p.r_nym);
            }
            Err(e) => note(&["r_nys", "r_nyd", "r_nym"], reason(e)),
        }
        match unconnected_label_stats(g) {
            Ok(s) => {
                r.r_unys = Some(s.r_unys);
                match s.r_ueys {
                    Some(v) => r.r_ueys = Some(v),
                    None => note(&["r_ueys"], "complete graph has no unconnected pairs".into()),
                }
            }
            Err(e) => note(&["r_unys", "r_ueys"], reason(e)),
        }
    }

    match inp.tokens {
        None => note(&["r_nwd"], "no token embeddings".into()),
        Some(t) => match neighbor_token_dissimilarity(g, t) {
            Ok(v) => r.r_nwd = Some(v),
            Err(e) => note(&["r_nwd"], reason(e)),
        },
    }
    match inp.sentences {
        None => note(&["r_ntd", "r_uts"], "no sentence embeddings".into()),
        Some(s) => {
            match neighbor_text_dissimilarity(g, s) {
                Ok(v) => r.r_ntd = Some(v),
                Err(e) => note(&["r_ntd"], reason(e)),
            }
            match unconnected_text_similarity(g, s, inp.uts_threshold, &inp.sampling) {
                Ok(est) => {
                    r.r_uts = Some(est.value);
                    if let Some(seed) = est.sample_seed {
                        r.pair_sample_size = Some(est.pairs_used);
                        r.seed = Some(seed);
                    }
                }
                Err(e) => note(&["r_uts"], reason(e)),
            }
        }
    }
    r.absent = absent;
    r
}
