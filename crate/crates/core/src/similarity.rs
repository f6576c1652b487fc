//! Node-pair similarity matrices between the structural and textual views.
//!
//! Three sources feed the transport problem:
//!
//! * a RealSoftMax cross-view score between each node's neighborhood set and
//!   every other node's token set ([`pairwise_rsm_similarity`]),
//! * the global cosine similarity between node-level embeddings
//!   ([`global_cosine`]),
//! * their convex combination ([`merge`]), which is then bordered by a filter
//!   prompt row and column ([`augment_with_prompt`]) so that items with no good
//!   match can send their mass to the prompt instead.

use ndarray::{s, Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingMatrix, RaggedEmbeddingSet};
use crate::error::{Error, Result};
use crate::numeric::norm;

pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_BETA: f64 = 0.5;
pub const DEFAULT_PROMPT_PERCENTILE: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityKind {
    Rsm,
    Cosine,
    Merged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    values: Array2<f64>,
    kind: SimilarityKind,
}

impl SimilarityMatrix {
    pub fn new(values: Array2<f64>, kind: SimilarityKind) -> Result<Self> {
        if !values.is_square() || values.is_empty() {
            return Err(Error::validation(format!(
                "similarity matrix must be square and non-empty, got {:?}",
                values.shape()
            )));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::validation("similarity matrix has non-finite entries"));
        }
        if kind == SimilarityKind::Cosine && values.iter().any(|x| x.abs() > 1.0) {
            return Err(Error::validation("cosine similarity outside [-1, 1]"));
        }
        Ok(SimilarityMatrix { values, kind })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn kind(&self) -> SimilarityKind {
        self.kind
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }
}

/// Prompt entries appended to the similarity matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptValue {
    /// One value broadcast to the whole border, corner included.
    Scalar(f64),
    /// Per-item border entries plus the corner.
    Vector { border: Vec<f64>, corner: f64 },
}

/// How the prompt value is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptRule {
    /// Nearest-rank percentile over all entries of the source matrix.
    Percentile(f64),
    Explicit(f64),
    ExplicitVector { border: Vec<f64>, corner: f64 },
}

impl Default for PromptRule {
    fn default() -> Self {
        PromptRule::Percentile(DEFAULT_PROMPT_PERCENTILE)
    }
}

/// `(N+1)×(N+1)` similarity with a prompt border.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSimilarity {
    values: Array2<f64>,
    prompt: PromptValue,
}

impl AugmentedSimilarity {
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn prompt(&self) -> &PromptValue {
        &self.prompt
    }

    /// Size of the source block.
    pub fn n_source(&self) -> usize {
        self.values.nrows() - 1
    }
}

/// `β · log Σ exp(x / β)`, evaluated with the max shifted out.
pub fn rsm(xs: &[f64], beta: f64) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::validation("rsm of an empty list"));
    }
    check_beta(beta)?;
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::validation("rsm input has non-finite entries"));
    }
    Ok(rsm_unchecked(xs, beta))
}

/// Written as `max + β·log Σ exp((x - max)/β)` so both envelope bounds hold
/// exactly in floating point.
pub(crate) fn rsm_unchecked(xs: &[f64], beta: f64) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + beta * xs.iter().map(|&x| ((x - m) / beta).exp()).sum::<f64>().ln()
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::validation(format!("beta must be positive, got {beta}")));
    }
    Ok(())
}

pub(crate) fn check_rsm_inputs(neigh: &RaggedEmbeddingSet, tokens: &RaggedEmbeddingSet) -> Result<()> {
    if neigh.len() != tokens.len() {
        return Err(Error::validation(format!(
            "neighborhood sets cover {} nodes, token sets {}",
            neigh.len(),
            tokens.len()
        )));
    }
    if neigh.dim() != tokens.dim() {
        return Err(Error::validation(format!(
            "neighborhood dim {} differs from token dim {}",
            neigh.dim(),
            tokens.dim()
        )));
    }
    Ok(())
}

/// Cross-view RealSoftMax similarity.
///
/// `s_ij = ½ (mean_k RSM_w ⟨n_ik, t_jw⟩ + mean_w RSM_k ⟨t_iw, n_jk⟩)` where
/// `n_i·` are node i's neighborhood vectors and `t_i·` its token vectors.
/// The result is not symmetric in general.
pub fn pairwise_rsm_similarity(
    neigh: &RaggedEmbeddingSet,
    tokens: &RaggedEmbeddingSet,
    beta: f64,
) -> Result<SimilarityMatrix> {
    check_beta(beta)?;
    check_rsm_inputs(neigh, tokens)?;
    SimilarityMatrix::new(rsm_matrix(neigh.as_slice(), tokens.as_slice(), beta), SimilarityKind::Rsm)
}

pub(crate) fn rsm_matrix(neigh: &[Array2<f64>], tokens: &[Array2<f64>], beta: f64) -> Array2<f64> {
    let n = neigh.len();
    let mut out = Array2::zeros((n, n));
    let mut buf = Vec::new();
    let mut mean_rsm = |d: Array2<f64>| {
        let mut acc = 0.0;
        for row in d.rows() {
            buf.clear();
            buf.extend(row.iter().copied());
            acc += rsm_unchecked(&buf, beta);
        }
        acc / d.nrows() as f64
    };
    for i in 0..n {
        for j in 0..n {
            // neighbor k of i against tokens of j, then token w of i against neighbors of j
            let first = mean_rsm(neigh[i].dot(&tokens[j].t()));
            let second = mean_rsm(tokens[i].dot(&neigh[j].t()));
            out[[i, j]] = 0.5 * (first + second);
        }
    }
    out
}

/// `Ŝ_ij = cos(a_i, b_j)`.
pub fn global_cosine(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<SimilarityMatrix> {
    if a.rows() != b.rows() || a.dim() != b.dim() {
        return Err(Error::validation(format!(
            "shape mismatch: {}x{} vs {}x{}",
            a.rows(),
            a.dim(),
            b.rows(),
            b.dim()
        )));
    }
    let parts = cosine_parts(a.view(), b.view())?;
    SimilarityMatrix::new(parts.values, SimilarityKind::Cosine)
}

/// Cosine matrix with the unit rows it was built from.
pub(crate) struct CosineParts {
    pub values: Array2<f64>,
    pub a_unit: Array2<f64>,
    pub b_unit: Array2<f64>,
    pub a_norm: Array1<f64>,
    pub b_norm: Array1<f64>,
}

pub(crate) fn cosine_parts(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<CosineParts> {
    let a_norm = row_norms(a, "structural")?;
    let b_norm = row_norms(b, "textual")?;
    let a_unit = &a / &a_norm.view().insert_axis(ndarray::Axis(1));
    let b_unit = &b / &b_norm.view().insert_axis(ndarray::Axis(1));
    let mut values = a_unit.dot(&b_unit.t());
    values.mapv_inplace(|x| x.clamp(-1.0, 1.0));
    Ok(CosineParts {
        values,
        a_unit,
        b_unit,
        a_norm,
        b_norm,
    })
}

pub(crate) fn row_norms(m: ArrayView2<'_, f64>, which: &str) -> Result<Array1<f64>> {
    let norms: Array1<f64> = m.rows().into_iter().map(norm).collect();
    if let Some(i) = norms.iter().position(|&x| x == 0.0) {
        return Err(Error::validation(format!("{which} embedding row {i} has zero norm")));
    }
    Ok(norms)
}

/// Affine rescaling of all entries onto `[-1, 1]`; constant input maps to zeros.
pub fn normalize_to_unit_range(m: ArrayView2<'_, f64>) -> Array2<f64> {
    let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Array2::zeros(m.raw_dim());
    }
    m.mapv(|x| 2.0 * (x - lo) / (hi - lo) - 1.0)
}

/// `alpha · normalize(s_rsm) + (1 − alpha) · s_cos`.
pub fn merge(s_rsm: &SimilarityMatrix, s_cos: &SimilarityMatrix, alpha: f64) -> Result<SimilarityMatrix> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::validation(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if s_rsm.values.shape() != s_cos.values.shape() {
        return Err(Error::validation(format!(
            "merge shape mismatch: {:?} vs {:?}",
            s_rsm.values.shape(),
            s_cos.values.shape()
        )));
    }
    let normalized = normalize_to_unit_range(s_rsm.view());
    let values = normalized * alpha + &(s_cos.values.view().to_owned() * (1.0 - alpha));
    SimilarityMatrix::new(values, SimilarityKind::Merged)
}

/// Nearest-rank percentile: the `ceil(p·n)`-th smallest value (1-based).
pub fn nearest_rank_percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::validation("percentile of an empty set"));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::validation(format!("percentile must lie in (0, 1), got {p}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len() as f64;
    // p·n like 0.1·30 lands a hair above an integer in binary floating point.
    let rank = (p * n - 1e-9 * n.max(1.0)).ceil().max(1.0) as usize;
    Ok(sorted[rank.min(sorted.len()) - 1])
}

/// Borders `s` with a prompt row and column.
pub fn augment_with_prompt(s: &SimilarityMatrix, rule: &PromptRule) -> Result<AugmentedSimilarity> {
    augment_values(s.view(), rule)
}

pub(crate) fn augment_values(s: ArrayView2<'_, f64>, rule: &PromptRule) -> Result<AugmentedSimilarity> {
    let n = s.nrows();
    let prompt = match rule {
        PromptRule::Percentile(p) => {
            let flat: Vec<f64> = s.iter().copied().collect();
            PromptValue::Scalar(nearest_rank_percentile(&flat, *p)?)
        }
        PromptRule::Explicit(v) => PromptValue::Scalar(*v),
        PromptRule::ExplicitVector { border, corner } => {
            if border.len() != n {
                return Err(Error::validation(format!(
                    "prompt vector has length {}, expected {n}",
                    border.len()
                )));
            }
            PromptValue::Vector {
                border: border.clone(),
                corner: *corner,
            }
        }
    };
    let mut values = Array2::zeros((n + 1, n + 1));
    values.slice_mut(s![..n, ..n]).assign(&s);
    match &prompt {
        PromptValue::Scalar(z) => {
            values.slice_mut(s![n, ..]).fill(*z);
            values.slice_mut(s![.., n]).fill(*z);
        }
        PromptValue::Vector { border, corner } => {
            for (i, &z) in border.iter().enumerate() {
                values[[n, i]] = z;
                values[[i, n]] = z;
            }
            values[[n, n]] = *corner;
        }
    }
    if values.iter().any(|x| !x.is_finite()) {
        return Err(Error::validation("prompt value is not finite"));
    }
    Ok(AugmentedSimilarity { values, prompt })
}
