//! Domain types shared by every module, plus the plain-text file formats
//! they travel in.
//!
//! | file          | layout                                              |
//! |---------------|-----------------------------------------------------|
//! | `edges.tsv`   | `src\tdst` per line, `#` comment lines allowed      |
//! | `labels.csv`  | `node_id,label` per line, no header                 |
//! | `matrix.csv`  | comma-separated floats, no header                   |
//! | `*.jsonl`     | `{"id": i, "vectors": [[..], ..]}` per line         |
//! | `report.json` | `{"params", "results", "seed", "version"}`          |

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Formats a float with 17 significant digits, enough for a bitwise round-trip.
pub fn fmt_f64(x: f64) -> String {
    format!("{:.16e}", x)
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_string(path: &Path, contents: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents.as_bytes())
        .map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Undirected simple graph with optional integer node labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Graph {
    num_nodes: usize,
    /// Sorted, deduplicated pairs with `u < v`.
    edges: Vec<(usize, usize)>,
    labels: Option<Vec<usize>>,
}

impl Graph {
    /// Builds a graph, normalizing each pair to `(min, max)` and dropping duplicates.
    pub fn new(num_nodes: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::Range(format!(
                    "edge ({u}, {v}) has an endpoint outside [0, {num_nodes})"
                )));
            }
            if u == v {
                return Err(Error::validation(format!("self-loop on node {u}")));
            }
            set.insert((u.min(v), u.max(v)));
        }
        Ok(Graph {
            num_nodes,
            edges: set.into_iter().collect(),
            labels: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.num_nodes {
            return Err(Error::validation(format!(
                "{} labels for {} nodes",
                labels.len(),
                self.num_nodes
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn require_labels(&self) -> Result<&[usize]> {
        self.labels()
            .ok_or_else(|| Error::validation("graph has no labels"))
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.edges.binary_search(&(u.min(v), u.max(v))).is_ok()
    }

    /// Sorted neighbor lists.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }

    /// Replaces the edge set, keeping node count and labels.
    pub fn with_edges(&self, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut g = Graph::new(self.num_nodes, edges)?;
        g.labels = self.labels.clone();
        Ok(g)
    }
}

/// Dense real matrix, one row per node. All entries finite.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix(Array2<f64>);

impl EmbeddingMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::validation("embedding matrix must be non-empty"));
        }
        if let Some(((r, c), _)) = values.indexed_iter().find(|(_, x)| !x.is_finite()) {
            return Err(Error::validation(format!("non-finite entry at ({r}, {c})")));
        }
        Ok(EmbeddingMatrix(values))
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.0.row(i)
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// Per-node variable-length sets of vectors sharing one dimension: the
/// neighborhood sets (self included) and the token sets.
#[derive(Debug, Clone, PartialEq)]
pub struct RaggedEmbeddingSet {
    per_node: Vec<Array2<f64>>,
    dim: usize,
}

impl RaggedEmbeddingSet {
    pub fn new(per_node: Vec<Array2<f64>>) -> Result<Self> {
        let dim = per_node
            .first()
            .map(|m| m.ncols())
            .ok_or_else(|| Error::validation("ragged set has no nodes"))?;
        if dim == 0 {
            return Err(Error::validation("ragged set vectors have dimension 0"));
        }
        for (i, m) in per_node.iter().enumerate() {
            if m.nrows() == 0 {
                return Err(Error::validation(format!("node {i} has an empty vector set")));
            }
            if m.ncols() != dim {
                return Err(Error::validation(format!(
                    "node {i} vectors have dimension {}, expected {dim}",
                    m.ncols()
                )));
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::validation(format!("node {i} has a non-finite entry")));
            }
        }
        Ok(RaggedEmbeddingSet { per_node, dim })
    }

    pub fn len(&self) -> usize {
        self.per_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_node.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize) -> &Array2<f64> {
        &self.per_node[i]
    }

    pub fn as_slice(&self) -> &[Array2<f64>] {
        &self.per_node
    }

    pub fn iter(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.per_node.iter()
    }

    pub fn into_inner(self) -> Vec<Array2<f64>> {
        self.per_node
    }
}

/// Loads a tab-separated edge list. `num_nodes` defaults to `1 + max id`.
pub fn load_graph(path: impl AsRef<Path>, num_nodes: Option<usize>) -> Result<Graph> {
    let path = path.as_ref();
    let text = read_to_string(path)?;
    let mut pairs = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(parse_err(path, line_no, "expected two tab-separated node ids"));
        };
        let parse = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| parse_err(path, line_no, format!("invalid node id {s:?}")))
        };
        let (u, v) = (parse(a)?, parse(b)?);
        if u == v {
            return Err(Error::validation(format!(
                "{}: line {line_no}: self-loop on node {u}",
                path.display()
            )));
        }
        if let Some(n) = num_nodes {
            if u >= n || v >= n {
                return Err(Error::Range(format!(
                    "{}: line {line_no}: node id >= num_nodes ({n})",
                    path.display()
                )));
            }
        }
        pairs.push((u, v));
    }
    let n = num_nodes.unwrap_or_else(|| {
        pairs
            .iter()
            .map(|&(u, v)| u.max(v) + 1)
            .max()
            .unwrap_or(0)
    });
    Graph::new(n, pairs)
}

pub fn write_graph(path: impl AsRef<Path>, g: &Graph) -> Result<()> {
    let mut out = String::new();
    for &(u, v) in g.edges() {
        out.push_str(&format!("{u}\t{v}\n"));
    }
    write_string(path.as_ref(), &out)
}

/// Loads `node_id,label` lines; every node in `0..num_nodes` must appear exactly once.
pub fn load_labels(path: impl AsRef<Path>, num_nodes: usize) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let text = read_to_string(path)?;
    let mut labels: Vec<Option<usize>> = vec![None; num_nodes];
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let (a, b) = line
            .split_once(',')
            .ok_or_else(|| parse_err(path, line_no, "expected node_id,label"))?;
        let id: usize = a
            .trim()
            .parse()
            .map_err(|_| parse_err(path, line_no, format!("invalid node id {a:?}")))?;
        let label: i64 = b
            .trim()
            .parse()
            .map_err(|_| parse_err(path, line_no, format!("invalid label {b:?}")))?;
        if label < 0 {
            return Err(Error::validation(format!(
                "{}: line {line_no}: negative label {label}",
                path.display()
            )));
        }
        let slot = labels.get_mut(id).ok_or_else(|| {
            Error::Range(format!(
                "{}: line {line_no}: node id {id} >= {num_nodes}",
                path.display()
            ))
        })?;
        if slot.is_some() {
            return Err(Error::validation(format!(
                "{}: line {line_no}: duplicate label for node {id}",
                path.display()
            )));
        }
        *slot = Some(label as usize);
    }
    labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| l.ok_or_else(|| Error::validation(format!("node {i} has no label"))))
        .collect()
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    let out: String = labels
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{i},{l}\n"))
        .collect();
    write_string(path.as_ref(), &out)
}

fn parse_float_row(path: &Path, line_no: usize, line: &str) -> Result<Vec<f64>> {
    line.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| parse_err(path, line_no, format!("invalid number {s:?}")))
        })
        .collect()
}

/// Loads a headerless CSV of floats into a raw matrix (finite check left to the caller).
pub fn load_raw_matrix(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let text = read_to_string(path)?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let row = parse_float_row(path, idx + 1, line)?;
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(parse_err(
                    path,
                    idx + 1,
                    format!("row has {} columns, expected {c}", row.len()),
                ))
            }
            _ => {}
        }
        if let Some(j) = row.iter().position(|x| !x.is_finite()) {
            return Err(Error::validation(format!(
                "{}: line {}: non-finite value in column {j}",
                path.display(),
                idx + 1
            )));
        }
        data.extend(row);
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::validation(format!("{}: empty matrix", path.display())))?;
    Ok(Array2::from_shape_vec((rows, cols), data).expect("shape matches collected rows"))
}

pub fn load_matrix(path: impl AsRef<Path>, expected_rows: Option<usize>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let m = load_raw_matrix(path)?;
    if let Some(n) = expected_rows {
        if m.nrows() != n {
            return Err(Error::validation(format!(
                "{}: {} rows, expected {n}",
                path.display(),
                m.nrows()
            )));
        }
    }
    EmbeddingMatrix::new(m)
}

pub fn write_matrix(path: impl AsRef<Path>, m: ArrayView2<'_, f64>) -> Result<()> {
    let mut out = String::with_capacity(m.len() * 24);
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|&x| fmt_f64(x)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    write_string(path.as_ref(), &out)
}

#[derive(Deserialize)]
struct RaggedLine {
    id: usize,
    vectors: Vec<Vec<f64>>,
}

/// Loads one `{"id", "vectors"}` object per line; ids must cover `0..N` once each.
pub fn load_ragged(path: impl AsRef<Path>) -> Result<RaggedEmbeddingSet> {
    let path = path.as_ref();
    let text = read_to_string(path)?;
    let mut entries: Vec<(usize, Array2<f64>)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let parsed: RaggedLine = serde_json::from_str(raw)
            .map_err(|e| parse_err(path, line_no, e.to_string()))?;
        if parsed.vectors.is_empty() {
            return Err(Error::validation(format!(
                "{}: line {line_no}: node {} has an empty vector set",
                path.display(),
                parsed.id
            )));
        }
        let dim = parsed.vectors[0].len();
        if parsed.vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::validation(format!(
                "{}: line {line_no}: inconsistent vector dimension",
                path.display()
            )));
        }
        let k = parsed.vectors.len();
        let flat: Vec<f64> = parsed.vectors.into_iter().flatten().collect();
        let m = Array2::from_shape_vec((k, dim), flat).expect("rows checked");
        entries.push((parsed.id, m));
    }
    let n = entries.len();
    let mut slots: Vec<Option<Array2<f64>>> = vec![None; n];
    for (id, m) in entries {
        let slot = slots.get_mut(id).ok_or_else(|| {
            Error::validation(format!("{}: id {id} outside 0..{n}", path.display()))
        })?;
        if slot.is_some() {
            return Err(Error::validation(format!(
                "{}: duplicate id {id}",
                path.display()
            )));
        }
        *slot = Some(m);
    }
    let per_node = slots
        .into_iter()
        .enumerate()
        .map(|(i, m)| m.ok_or_else(|| Error::validation(format!("missing id {i}"))))
        .collect::<Result<Vec<_>>>()?;
    RaggedEmbeddingSet::new(per_node)
}

pub fn write_ragged(path: impl AsRef<Path>, set: &RaggedEmbeddingSet) -> Result<()> {
    let mut out = String::new();
    for (i, m) in set.iter().enumerate() {
        let rows: Vec<String> = m
            .rows()
            .into_iter()
            .map(|r| {
                let xs: Vec<String> = r.iter().map(|&x| fmt_f64(x)).collect();
                format!("[{}]", xs.join(","))
            })
            .collect();
        out.push_str(&format!("{{\"id\":{i},\"vectors\":[{}]}}\n", rows.join(",")));
    }
    write_string(path.as_ref(), &out)
}

/// Self-describing run report: resolved parameters, results, seed and version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub params: Map<String, Value>,
    pub results: Map<String, Value>,
    pub seed: u64,
    pub version: String,
}

impl Report {
    pub fn new(seed: u64) -> Self {
        Report {
            params: Map::new(),
            results: Map::new(),
            seed,
            version: crate::VERSION.to_string(),
        }
    }

    pub fn param(&mut self, key: &str, value: impl Serialize) -> &mut Self {
        self.params.insert(key.to_string(), to_value(value));
        self
    }

    pub fn result(&mut self, key: &str, value: impl Serialize) -> &mut Self {
        self.results.insert(key.to_string(), to_value(value));
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_string(path.as_ref(), &(self.to_json()? + "\n"))
    }
}

fn to_value(value: impl Serialize) -> Value {
    // Non-finite floats become null rather than failing serialization.
    serde_json::to_value(value).unwrap_or(Value::Null)
}
