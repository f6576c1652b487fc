use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::objectives::{
    check_square, col_lse, infonce_terms, lhm_sets, lhm_target, lhm_terms, mha_terms, retain_negatives, row_lse,
    NegativeSets, MAX_EXPONENT,
};
use super::LossConfig;
use crate::data::{load_matrix, load_ragged, write_matrix, write_ragged, EmbeddingMatrix, RaggedEmbeddingSet};
use crate::error::{Error, Result};
use crate::numeric::log_sum_exp;
use crate::similarity::{augment_values, cosine_parts, normalize_to_unit_range, rsm_matrix, CosineParts};
use crate::transport::{crop_plan, solve};

/// The four embedding inputs of the objectives. Fields are public so callers
/// can perturb or update them in place; [`Bundle::validate`] re-checks shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub h_struct: Array2<f64>,
    pub h_text: Array2<f64>,
    pub neigh: Vec<Array2<f64>>,
    pub tokens: Vec<Array2<f64>>,
}

pub const STRUCT_FILE: &str = "struct.csv";
pub const TEXT_FILE: &str = "text.csv";
pub const NEIGH_FILE: &str = "neigh.jsonl";
pub const TOKENS_FILE: &str = "tokens.jsonl";

impl Bundle {
    pub fn from_parts(
        h_struct: EmbeddingMatrix,
        h_text: EmbeddingMatrix,
        neigh: RaggedEmbeddingSet,
        tokens: RaggedEmbeddingSet,
    ) -> Result<Self> {
        let b = Bundle {
            h_struct: h_struct.into_inner(),
            h_text: h_text.into_inner(),
            neigh: neigh.into_inner(),
            tokens: tokens.into_inner(),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn n(&self) -> usize {
        self.h_struct.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.h_struct.nrows();
        if n == 0 {
            return Err(Error::validation("bundle has no nodes"));
        }
        if self.h_text.dim() != self.h_struct.dim() {
            return Err(Error::validation(format!(
                "structural embeddings are {:?}, textual {:?}",
                self.h_struct.dim(),
                self.h_text.dim()
            )));
        }
        if self.neigh.len() != n || self.tokens.len() != n {
            return Err(Error::validation(format!(
                "bundle has {n} nodes but {} neighborhood and {} token sets",
                self.neigh.len(),
                self.tokens.len()
            )));
        }
        let d = self.neigh[0].ncols();
        for (what, sets) in [("neighborhood", &self.neigh), ("token", &self.tokens)] {
            for (i, m) in sets.iter().enumerate() {
                if m.nrows() == 0 || m.ncols() != d {
                    return Err(Error::validation(format!(
                        "{what} set of node {i} has shape {:?}, expected (>0, {d})",
                        m.dim()
                    )));
                }
            }
        }
        let all = self
            .h_struct
            .iter()
            .chain(self.h_text.iter())
            .chain(self.neigh.iter().flatten())
            .chain(self.tokens.iter().flatten());
        if all.into_iter().any(|x| !x.is_finite()) {
            return Err(Error::validation("bundle has non-finite entries"));
        }
        Ok(())
    }

    /// Reads `struct.csv`, `text.csv`, `neigh.jsonl` and `tokens.jsonl` from `dir`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let h_struct = load_matrix(dir.join(STRUCT_FILE), None)?;
        let h_text = load_matrix(dir.join(TEXT_FILE), Some(h_struct.rows()))?;
        let neigh = load_ragged(dir.join(NEIGH_FILE))?;
        let tokens = load_ragged(dir.join(TOKENS_FILE))?;
        Bundle::from_parts(h_struct, h_text, neigh, tokens)
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        write_matrix(dir.join(STRUCT_FILE), self.h_struct.view())?;
        write_matrix(dir.join(TEXT_FILE), self.h_text.view())?;
        write_ragged(dir.join(NEIGH_FILE), &RaggedEmbeddingSet::new(self.neigh.clone())?)?;
        write_ragged(dir.join(TOKENS_FILE), &RaggedEmbeddingSet::new(self.tokens.clone())?)
    }
}

/// Similarity matrices of a bundle: `S = α·normalize(s_rsm) + (1 − α)·Ŝ`.
pub struct Similarities {
    pub s_rsm: Array2<f64>,
    pub s_hat: Array2<f64>,
    pub merged: Array2<f64>,
    pub(crate) cos: CosineParts,
}

pub fn similarities(b: &Bundle, cfg: &LossConfig) -> Result<Similarities> {
    let s_rsm = rsm_matrix(&b.neigh, &b.tokens, cfg.beta);
    let cos = cosine_parts(b.h_struct.view(), b.h_text.view())?;
    let merged = normalize_to_unit_range(s_rsm.view()) * cfg.alpha + &(&cos.values * (1.0 - cfg.alpha));
    if merged.iter().any(|x| !x.is_finite()) {
        return Err(Error::numerical("non-finite similarity"));
    }
    Ok(Similarities {
        s_rsm,
        s_hat: cos.values.clone(),
        merged,
        cos,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDiagnostics {
    pub iterations_run: usize,
    pub converged: bool,
    pub marginal_error: f64,
}

/// Everything held constant between plan refreshes.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenState {
    /// Cropped plan on the prompt-augmented merged similarity.
    pub q_star: Array2<f64>,
    /// Cropped plan on the prompt-augmented global cosine.
    pub q_hat: Array2<f64>,
    pub mha_neg: NegativeSets,
    pub lhm_sets: Vec<Vec<usize>>,
    pub mha_plan: PlanDiagnostics,
    pub lhm_plan: PlanDiagnostics,
}

fn cropped_plan(s: &Array2<f64>, cfg: &LossConfig) -> Result<(Array2<f64>, PlanDiagnostics)> {
    let aug = augment_values(s.view(), &cfg.prompt)?;
    let sol = solve(aug.values(), &cfg.ot)?;
    let diag = PlanDiagnostics {
        iterations_run: sol.iterations_run,
        converged: sol.converged,
        marginal_error: sol.marginal_error(),
    };
    Ok((crop_plan(&sol, s.nrows())?, diag))
}

/// Solves both transport problems and fixes the retained negative sets.
pub fn freeze(sims: &Similarities, cfg: &LossConfig) -> Result<FrozenState> {
    cfg.validate()?;
    let n = sims.merged.nrows();
    let k = cfg.neg_count_for(n);
    let (q_star, mha_plan) = cropped_plan(&sims.merged, cfg)?;
    let (q_hat, lhm_plan) = cropped_plan(&sims.s_hat, cfg)?;
    let mha_neg = retain_negatives((&q_star * &sims.merged).view(), k);
    let lhm_sets = lhm_sets(sims.s_hat.view(), k);
    Ok(FrozenState {
        q_star,
        q_hat,
        mha_neg,
        lhm_sets,
        mha_plan,
        lhm_plan,
    })
}

/// `L_MHA + L_LHM` under a frozen state, with per-node terms.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveValue {
    pub l_mha: f64,
    pub l_lhm: f64,
    pub mha_terms: Array1<f64>,
    pub lhm_terms: Array1<f64>,
}

impl ContrastiveValue {
    pub fn sum(&self) -> f64 {
        self.l_mha + self.l_lhm
    }
}

fn mha_exponents(sims: &Similarities, frozen: &FrozenState, tau: f64) -> Result<Array2<f64>> {
    let x = &frozen.q_star * &sims.merged / tau;
    if let Some(((i, j), v)) = x.indexed_iter().find(|(_, v)| !(v.abs() <= MAX_EXPONENT)) {
        return Err(Error::numerical(format!(
            "affinity exponent {v} at ({i}, {j}) exceeds ±{MAX_EXPONENT}"
        )));
    }
    Ok(x)
}

pub fn evaluate_frozen(sims: &Similarities, frozen: &FrozenState, cfg: &LossConfig) -> Result<ContrastiveValue> {
    let n = sims.merged.nrows();
    if frozen.q_star.nrows() != n || frozen.q_hat.nrows() != n {
        return Err(Error::validation("frozen state does not match the bundle size"));
    }
    let x = mha_exponents(sims, frozen, cfg.tau)?;
    let mha = mha_terms(x.view(), &frozen.mha_neg);
    let target = lhm_target(frozen.q_hat.view())?;
    let lhm = lhm_terms(sims.s_hat.view(), &target, cfg.tau, &frozen.lhm_sets);
    let value = ContrastiveValue {
        l_mha: mha.mean().expect("non-empty"),
        l_lhm: lhm.mean().expect("non-empty"),
        mha_terms: mha,
        lhm_terms: lhm,
    };
    if !value.sum().is_finite() {
        return Err(Error::numerical("non-finite contrastive loss"));
    }
    Ok(value)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetainedNegatives {
    pub mha_rows: Vec<Vec<usize>>,
    pub mha_cols: Vec<Vec<usize>>,
    pub lhm_rows: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_mha: f64,
    pub l_lhm: f64,
    /// Symmetric InfoNCE on the merged similarity, for reference.
    pub l_infonce: f64,
    pub l_nc: Option<f64>,
    /// `l_nc + λ (l_mha + l_lhm)`, with `l_nc = 0` when absent.
    pub l_total: f64,
    pub per_node_mha: Vec<f64>,
    pub per_node_lhm: Vec<f64>,
    pub per_node_infonce: Vec<f64>,
    pub retained_negatives: RetainedNegatives,
    pub mha_plan: PlanDiagnostics,
    pub lhm_plan: PlanDiagnostics,
}

/// Full forward pass on a bundle: similarities, both plans, all losses.
pub fn loss_report(b: &Bundle, cfg: &LossConfig, l_nc: Option<f64>) -> Result<(LossReport, FrozenState)> {
    b.validate()?;
    let sims = similarities(b, cfg)?;
    let frozen = freeze(&sims, cfg)?;
    let v = evaluate_frozen(&sims, &frozen, cfg)?;
    let info = infonce_terms(sims.merged.view(), cfg.tau);
    let l_total = super::loss_total(l_nc.unwrap_or(0.0), v.l_mha, v.l_lhm, cfg.lambda)?;
    let report = LossReport {
        l_mha: v.l_mha,
        l_lhm: v.l_lhm,
        l_infonce: info.mean().expect("non-empty"),
        l_nc,
        l_total,
        per_node_mha: v.mha_terms.to_vec(),
        per_node_lhm: v.lhm_terms.to_vec(),
        per_node_infonce: info.to_vec(),
        retained_negatives: RetainedNegatives {
            mha_rows: frozen.mha_neg.rows.clone(),
            mha_cols: frozen.mha_neg.cols.clone(),
            lhm_rows: frozen.lhm_sets.clone(),
        },
        mha_plan: frozen.mha_plan.clone(),
        lhm_plan: frozen.lhm_plan.clone(),
    };
    Ok((report, frozen))
}

/// Gradients with the same shapes as the [`Bundle`] fields.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleGradient {
    pub h_struct: Array2<f64>,
    pub h_text: Array2<f64>,
    pub neigh: Vec<Array2<f64>>,
    pub tokens: Vec<Array2<f64>>,
}

fn softmax_subset(values: impl Iterator<Item = f64> + Clone) -> impl Iterator<Item = f64> {
    let lse = log_sum_exp(values.clone());
    values.map(move |v| (v - lse).exp())
}

/// `∂L_MHA/∂x` for exponents `x` and frozen sets.
fn mha_backward(x: ArrayView2<'_, f64>, neg: &NegativeSets) -> Array2<f64> {
    let n = x.nrows();
    let inv_n = 1.0 / n as f64;
    let mut g = Array2::zeros((n, n));
    for i in 0..n {
        let rows = &neg.rows[i];
        for (&j, w) in rows.iter().zip(softmax_subset(rows.iter().map(|&j| x[[i, j]]))) {
            g[[i, j]] += inv_n * w;
        }
        let cols = &neg.cols[i];
        for (&k, w) in cols.iter().zip(softmax_subset(cols.iter().map(|&k| x[[k, i]]))) {
            g[[k, i]] += inv_n * w;
        }
        g[[i, i]] -= 2.0 * inv_n;
    }
    g
}

/// `∂L_LHM/∂z` for `z = ŝ/τ`.
fn lhm_backward(z: ArrayView2<'_, f64>, p: &Array2<f64>, sets: &[Vec<usize>]) -> Array2<f64> {
    let n = z.nrows();
    let inv_n = 1.0 / n as f64;
    let rl = row_lse(z);
    let cl = col_lse(z);
    let mut row_weight = Array1::<f64>::zeros(n);
    let mut col_weight = Array1::<f64>::zeros(n);
    let mut g = Array2::zeros((n, n));
    for (i, set) in sets.iter().enumerate() {
        for &j in set {
            row_weight[i] += p[[i, j]];
            col_weight[j] += p[[i, j]];
            g[[i, j]] -= 2.0 * p[[i, j]];
        }
    }
    for ((a, b), v) in g.indexed_iter_mut() {
        let row_soft = (z[[a, b]] - rl[a]).exp();
        let col_soft = (z[[a, b]] - cl[b]).exp();
        *v = inv_n * (*v + row_weight[a] * row_soft + col_weight[b] * col_soft);
    }
    g
}

/// Backward of [`normalize_to_unit_range`] given upstream `g`.
fn normalize_backward(x: ArrayView2<'_, f64>, g: &Array2<f64>) -> Array2<f64> {
    let mut lo = (0, f64::INFINITY);
    let mut hi = (0, f64::NEG_INFINITY);
    for (k, &v) in x.iter().enumerate() {
        if v < lo.1 {
            lo = (k, v);
        }
        if v > hi.1 {
            hi = (k, v);
        }
    }
    let range = hi.1 - lo.1;
    if range <= 0.0 {
        return Array2::zeros(x.raw_dim());
    }
    let mut out = g * (2.0 / range);
    let (mut d_lo, mut d_hi) = (0.0, 0.0);
    for (&v, &gv) in x.iter().zip(g.iter()) {
        d_lo += gv * 2.0 * (v - hi.1) / (range * range);
        d_hi -= gv * 2.0 * (v - lo.1) / (range * range);
    }
    let ncols = x.ncols();
    out[[lo.0 / ncols, lo.0 % ncols]] += d_lo;
    out[[hi.0 / ncols, hi.0 % ncols]] += d_hi;
    out
}

fn softmax_rows(m: &mut Array2<f64>, beta: f64) {
    for mut row in m.rows_mut() {
        let lse = log_sum_exp(row.iter().map(|v| v / beta));
        row.mapv_inplace(|v| (v / beta - lse).exp());
    }
}

/// Pulls an upstream gradient on the RealSoftMax similarity back to the
/// neighborhood and token vectors. The derivative of `RSM_β` in each input is
/// its softmax weight.
pub fn rsm_backward(
    neigh: &[Array2<f64>],
    tokens: &[Array2<f64>],
    beta: f64,
    g: ArrayView2<'_, f64>,
) -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
    let n = neigh.len();
    let mut gn: Vec<Array2<f64>> = neigh.iter().map(|m| Array2::zeros(m.raw_dim())).collect();
    let mut gt: Vec<Array2<f64>> = tokens.iter().map(|m| Array2::zeros(m.raw_dim())).collect();
    for i in 0..n {
        for j in 0..n {
            let gij = g[[i, j]];
            if gij == 0.0 {
                continue;
            }
            // first term: rows are i's neighbors, columns j's tokens
            let mut w = neigh[i].dot(&tokens[j].t());
            softmax_rows(&mut w, beta);
            let c = 0.5 * gij / neigh[i].nrows() as f64;
            gn[i].scaled_add(c, &w.dot(&tokens[j]));
            gt[j].scaled_add(c, &w.t().dot(&neigh[i]));
            // second term: rows are i's tokens, columns j's neighbors
            let mut w = tokens[i].dot(&neigh[j].t());
            softmax_rows(&mut w, beta);
            let c = 0.5 * gij / tokens[i].nrows() as f64;
            gt[i].scaled_add(c, &w.dot(&neigh[j]));
            gn[j].scaled_add(c, &w.t().dot(&tokens[i]));
        }
    }
    (gn, gt)
}

/// Backward of the row-normalized cosine matrix.
fn cosine_backward(cos: &CosineParts, g: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let gs = g * &cos.values;
    let row = gs.sum_axis(Axis(1)).insert_axis(Axis(1));
    let col = gs.sum_axis(Axis(0)).insert_axis(Axis(1));
    let ga = (g.dot(&cos.b_unit) - &(&cos.a_unit * &row)) / &cos.a_norm.view().insert_axis(Axis(1));
    let gb = (g.t().dot(&cos.a_unit) - &(&cos.b_unit * &col)) / &cos.b_norm.view().insert_axis(Axis(1));
    (ga, gb)
}

fn first_non_finite(name: &str, m: &Array2<f64>) -> Option<String> {
    m.indexed_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|((i, j), _)| format!("{name}[{i}, {j}]"))
}

/// `L_MHA + L_LHM` and its gradient in every bundle entry, plans and retained
/// sets held at `frozen`.
pub fn contrastive_gradient(
    b: &Bundle,
    cfg: &LossConfig,
    frozen: &FrozenState,
) -> Result<(ContrastiveValue, BundleGradient)> {
    let sims = similarities(b, cfg)?;
    let value = evaluate_frozen(&sims, frozen, cfg)?;
    let n = b.n();
    check_square(sims.merged.view(), "similarity")?;

    let x = mha_exponents(&sims, frozen, cfg.tau)?;
    let g_s = mha_backward(x.view(), &frozen.mha_neg) * &frozen.q_star / cfg.tau;

    let z = sims.s_hat.mapv(|v| v / cfg.tau);
    let target = lhm_target(frozen.q_hat.view())?;
    let g_hat = lhm_backward(z.view(), target.p(), &frozen.lhm_sets) / cfg.tau;

    let g_cos = &g_s * (1.0 - cfg.alpha) + &g_hat;
    let g_rsm = normalize_backward(sims.s_rsm.view(), &g_s) * cfg.alpha;

    let (h_struct, h_text) = cosine_backward(&sims.cos, &g_cos);
    let (neigh, tokens) = rsm_backward(&b.neigh, &b.tokens, cfg.beta, g_rsm.view());

    let located = first_non_finite("h_struct", &h_struct)
        .or_else(|| first_non_finite("h_text", &h_text))
        .or_else(|| (0..n).find_map(|i| first_non_finite(&format!("neigh[{i}]"), &neigh[i])))
        .or_else(|| (0..n).find_map(|i| first_non_finite(&format!("tokens[{i}]"), &tokens[i])));
    if let Some(at) = located {
        return Err(Error::numerical(format!("non-finite gradient at {at}")));
    }
    Ok((
        value,
        BundleGradient {
            h_struct,
            h_text,
            neigh,
            tokens,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn symmetric_bundle(n: usize) -> Bundle {
        let v = array![[0.6, -0.2, 0.3]];
        Bundle {
            h_struct: Array2::from_shape_fn((n, 3), |(_, k)| v[[0, k]]),
            h_text: Array2::from_shape_fn((n, 3), |(_, k)| v[[0, k]] + 0.1),
            neigh: vec![v.clone(); n],
            tokens: vec![v.clone() * 0.5; n],
        }
    }

    #[test]
    fn rsm_derivative_of_equal_inputs() {
        // s_00 = ½(RSM_1⟨n, t_0⟩ + RSM_1⟨t, n_0⟩) over two tokens
        let neigh = vec![array![[1.0]]];
        let tokens = vec![array![[0.0], [0.0]]];
        let (gn, gt) = rsm_backward(&neigh, &tokens, 1.0, array![[1.0]].view());
        // first term gives ½·(0.5·0 + 0.5·0) to n; second term averages tokens
        assert_eq!(gn[0], array![[0.0]]);
        assert_eq!(gt[0], array![[0.25 + 0.25], [0.25 + 0.25]]);
    }

    #[test]
    fn identical_nodes_get_identical_gradients() {
        let b = symmetric_bundle(3);
        let cfg = LossConfig::default();
        let sims = similarities(&b, &cfg).unwrap();
        let frozen = freeze(&sims, &cfg).unwrap();
        let (_, g) = contrastive_gradient(&b, &cfg, &frozen).unwrap();
        for i in 1..3 {
            for (a, c) in g.h_struct.row(0).iter().zip(g.h_struct.row(i).iter()) {
                assert!((a - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn report_total_matches_components() {
        let b = symmetric_bundle(2);
        let cfg = LossConfig::default();
        let (r, _) = loss_report(&b, &cfg, Some(0.7)).unwrap();
        assert!((r.l_total - (0.7 + cfg.lambda * (r.l_mha + r.l_lhm))).abs() < 1e-15);
        assert_eq!(r.per_node_mha.len(), 2);
    }

    #[test]
    fn normalize_backward_matches_difference() {
        let x = array![[0.3, -1.2], [2.0, 0.5]];
        let g = array![[0.7, -0.1], [0.4, 1.3]];
        let an = normalize_backward(x.view(), &g);
        let f = |m: &Array2<f64>| (normalize_to_unit_range(m.view()) * &g).sum();
        for i in 0..2 {
            for j in 0..2 {
                let h = 1e-6;
                let mut p = x.clone();
                p[[i, j]] += h;
                let mut m = x.clone();
                m[[i, j]] -= h;
                let fd = (f(&p) - f(&m)) / (2.0 * h);
                assert!((fd - an[[i, j]]).abs() < 1e-8, "{i},{j}: {fd} vs {}", an[[i, j]]);
            }
        }
    }

    #[test]
    fn validate_catches_shape_errors() {
        let mut b = symmetric_bundle(2);
        b.tokens.pop();
        assert!(b.validate().is_err());
    }
}
