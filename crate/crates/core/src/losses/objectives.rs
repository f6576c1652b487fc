use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::log_sum_exp;

/// Largest `|q·s̄/τ|` accepted before `exp` is considered to overflow.
pub const MAX_EXPONENT: f64 = 700.0;

/// Per-row (and per-column) retained index lists, self included, ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeSets {
    pub rows: Vec<Vec<usize>>,
    pub cols: Vec<Vec<usize>>,
}

/// `d_ij = exp(x_ij)` with `x_ij = q*_ij s̄_ij / τ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affinity {
    /// The exponents; losses are evaluated from these to stay in log space.
    pub x: Array2<f64>,
    pub d: Array2<f64>,
    pub neg: NegativeSets,
}

pub(crate) fn check_square(m: ArrayView2<'_, f64>, what: &str) -> Result<usize> {
    let n = m.nrows();
    if n == 0 || m.ncols() != n {
        return Err(Error::validation(format!("{what} must be a non-empty square matrix, got {:?}", m.shape())));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::validation(format!("{what} has non-finite entries")));
    }
    Ok(n)
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::validation(format!("tau must be positive, got {tau}")));
    }
    Ok(())
}

fn check_neg_count(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::validation("neg_count must be at least 1"));
    }
    Ok(())
}

/// `self_idx` plus the `k − 1` other indices with the largest `score`, ties to
/// the lower index, returned ascending.
pub(crate) fn retain_top(n: usize, self_idx: usize, k: usize, score: impl Fn(usize) -> f64) -> Vec<usize> {
    let mut others: Vec<usize> = (0..n).filter(|&j| j != self_idx).collect();
    others.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
    others.truncate(k.saturating_sub(1));
    others.push(self_idx);
    others.sort_unstable();
    others
}

/// Row sets `R_i` and column sets `C_i` by largest `scores`, self forced in.
pub fn retain_negatives(scores: ArrayView2<'_, f64>, neg_count: usize) -> NegativeSets {
    let n = scores.nrows();
    let rows = (0..n).map(|i| retain_top(n, i, neg_count, |j| scores[[i, j]])).collect();
    let cols = (0..n).map(|j| retain_top(n, j, neg_count, |i| scores[[i, j]])).collect();
    NegativeSets { rows, cols }
}

pub fn ot_affinity(q: ArrayView2<'_, f64>, sbar: ArrayView2<'_, f64>, tau: f64, neg_count: usize) -> Result<Affinity> {
    let n = check_square(q, "plan")?;
    check_square(sbar, "similarity block")?;
    if sbar.nrows() != n {
        return Err(Error::validation(format!("plan is {n}x{n}, similarity block {:?}", sbar.shape())));
    }
    check_tau(tau)?;
    check_neg_count(neg_count)?;
    let score = &q * &sbar;
    let x = &score / tau;
    if let Some(((i, j), v)) = x.indexed_iter().find(|(_, v)| v.abs() > MAX_EXPONENT) {
        return Err(Error::numerical(format!(
            "affinity exponent {v} at ({i}, {j}) exceeds ±{MAX_EXPONENT}"
        )));
    }
    let d = x.mapv(f64::exp);
    let neg = retain_negatives(score.view(), neg_count);
    Ok(Affinity { x, d, neg })
}

/// Per-node `−log d_ii/Σ_{R_i} d_ij − log d_ii/Σ_{C_i} d_ji` from exponents.
pub fn mha_terms(x: ArrayView2<'_, f64>, neg: &NegativeSets) -> Array1<f64> {
    let n = x.nrows();
    Array1::from_shape_fn(n, |i| {
        let row = log_sum_exp(neg.rows[i].iter().map(|&j| x[[i, j]]));
        let col = log_sum_exp(neg.cols[i].iter().map(|&k| x[[k, i]]));
        (row - x[[i, i]]) + (col - x[[i, i]])
    })
}

pub fn loss_mha(aff: &Affinity) -> f64 {
    mha_terms(aff.x.view(), &aff.neg).mean().expect("non-empty")
}

/// Row-stochastic `P = rownormalize(I + Q̂*)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LhmTarget {
    p: Array2<f64>,
}

impl LhmTarget {
    pub fn p(&self) -> &Array2<f64> {
        &self.p
    }
}

pub fn lhm_target(q_hat: ArrayView2<'_, f64>) -> Result<LhmTarget> {
    check_square(q_hat, "plan")?;
    if q_hat.iter().any(|&v| v < 0.0) {
        return Err(Error::validation("plan has negative entries"));
    }
    let mut p = q_hat.to_owned();
    for (i, mut row) in p.rows_mut().into_iter().enumerate() {
        row[i] += 1.0;
        let total = row.sum();
        row /= total;
    }
    Ok(LhmTarget { p })
}

/// `R̂_i`: top `neg_count` of row `i` of `ŝ`, self forced in.
pub fn lhm_sets(s_hat: ArrayView2<'_, f64>, neg_count: usize) -> Vec<Vec<usize>> {
    let n = s_hat.nrows();
    (0..n).map(|i| retain_top(n, i, neg_count, |j| s_hat[[i, j]])).collect()
}

pub(crate) fn row_lse(z: ArrayView2<'_, f64>) -> Array1<f64> {
    z.rows().into_iter().map(|r| log_sum_exp(r.iter().copied())).collect()
}

pub(crate) fn col_lse(z: ArrayView2<'_, f64>) -> Array1<f64> {
    z.columns().into_iter().map(|c| log_sum_exp(c.iter().copied())).collect()
}

/// Per-node `−Σ_{j∈R̂_i} p_ij (log k'_ij + log k''_ij)` with `k'` the row softmax
/// and `k''` the column softmax (normalizing over `i`) of `ŝ/τ`.
pub fn lhm_terms(s_hat: ArrayView2<'_, f64>, target: &LhmTarget, tau: f64, sets: &[Vec<usize>]) -> Array1<f64> {
    let z = s_hat.mapv(|v| v / tau);
    let rl = row_lse(z.view());
    let cl = col_lse(z.view());
    Array1::from_shape_fn(z.nrows(), |i| {
        -sets[i]
            .iter()
            .map(|&j| target.p[[i, j]] * ((z[[i, j]] - rl[i]) + (z[[i, j]] - cl[j])))
            .sum::<f64>()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LhmLoss {
    pub loss: f64,
    pub per_node: Array1<f64>,
    pub sets: Vec<Vec<usize>>,
}

pub fn loss_lhm(s_hat: ArrayView2<'_, f64>, target: &LhmTarget, tau: f64, neg_count: usize) -> Result<LhmLoss> {
    let n = check_square(s_hat, "similarity")?;
    if target.p.nrows() != n {
        return Err(Error::validation(format!(
            "target is {}x{0}, similarity {n}x{n}",
            target.p.nrows()
        )));
    }
    check_tau(tau)?;
    check_neg_count(neg_count)?;
    let sets = lhm_sets(s_hat, neg_count);
    let per_node = lhm_terms(s_hat, target, tau, &sets);
    Ok(LhmLoss {
        loss: per_node.mean().expect("non-empty"),
        per_node,
        sets,
    })
}

/// Per-node symmetric InfoNCE over all columns and rows.
pub fn infonce_terms(s: ArrayView2<'_, f64>, tau: f64) -> Array1<f64> {
    let z = s.mapv(|v| v / tau);
    let rl = row_lse(z.view());
    let cl = col_lse(z.view());
    Array1::from_shape_fn(z.nrows(), |i| (rl[i] - z[[i, i]]) + (cl[i] - z[[i, i]]))
}

pub fn loss_infonce(s: ArrayView2<'_, f64>, tau: f64) -> Result<f64> {
    check_square(s, "similarity")?;
    check_tau(tau)?;
    Ok(infonce_terms(s, tau).mean().expect("non-empty"))
}

/// `l_nc + λ (l_mha + l_lhm)`.
pub fn loss_total(l_nc: f64, l_mha: f64, l_lhm: f64, lambda: f64) -> Result<f64> {
    if ![l_nc, l_mha, l_lhm, lambda].iter().all(|v| v.is_finite()) {
        return Err(Error::numerical("non-finite loss component"));
    }
    Ok(l_nc + lambda * (l_mha + l_lhm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::f64::consts::{E, LN_2};

    #[test]
    fn affinity_examples() {
        let q = Array2::from_elem((2, 2), 1.0 / 9.0);
        let a = ot_affinity(q.view(), Array2::zeros((2, 2)).view(), 0.5, 2).unwrap();
        assert!(a.d.iter().all(|&v| v == 1.0));

        let q = array![[0.5, 0.0], [0.0, 0.5]];
        let s = array![[1.0, 0.0], [0.0, 1.0]];
        let a = ot_affinity(q.view(), s.view(), 0.5, 1).unwrap();
        assert!((a.d[[0, 0]] - E).abs() < 1e-15);
        assert_eq!(a.neg.rows, vec![vec![0], vec![1]]);
        assert_eq!(a.neg.cols, vec![vec![0], vec![1]]);
    }

    #[test]
    fn affinity_exponent_limit() {
        let q = array![[1.0]];
        let s = array![[1.0]];
        assert!(matches!(ot_affinity(q.view(), s.view(), 1e-3, 1), Err(Error::Numerical(_))));
    }

    #[test]
    fn retention_prefers_large_scores_and_low_index_ties() {
        let scores = array![[0.0, 0.5, 0.5, 0.9], [0.0; 4], [0.0; 4], [0.0; 4]];
        let sets = retain_negatives(scores.view(), 3);
        assert_eq!(sets.rows[0], vec![0, 1, 3]);
        assert_eq!(sets.rows[2], vec![0, 1, 2]);
        assert_eq!(sets.cols[3], vec![0, 1, 3]);
    }

    #[test]
    fn mha_examples() {
        let q = Array2::from_elem((2, 2), 1.0 / 9.0);
        let a = ot_affinity(q.view(), Array2::zeros((2, 2)).view(), 1.0, 2).unwrap();
        assert!((loss_mha(&a) - 2.0 * LN_2).abs() < 1e-12);
        let a = ot_affinity(q.view(), Array2::zeros((2, 2)).view(), 1.0, 1).unwrap();
        assert_eq!(loss_mha(&a), 0.0);
    }

    #[test]
    fn mha_decreases_as_diagonal_dominates() {
        let q = Array2::from_elem((2, 2), 1.0);
        let losses: Vec<f64> = [1.0f64, 10.0, 100.0]
            .iter()
            .map(|&dii| {
                let s = array![[dii.ln(), 0.0], [0.0, dii.ln()]];
                loss_mha(&ot_affinity(q.view(), s.view(), 1.0, 2).unwrap())
            })
            .collect();
        assert!(losses[0] > losses[1] && losses[1] > losses[2], "{losses:?}");
    }

    #[test]
    fn lhm_target_examples() {
        let t = lhm_target(Array2::from_elem((2, 2), 1.0 / 9.0).view()).unwrap();
        for row in t.p().rows() {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
        }
        assert!((t.p()[[0, 0]] - 10.0 / 11.0).abs() < 1e-15);
        assert!((t.p()[[0, 1]] - 1.0 / 11.0).abs() < 1e-15);
        let t = lhm_target(Array2::zeros((3, 3)).view()).unwrap();
        assert_eq!(t.p(), &Array2::<f64>::eye(3));
    }

    #[test]
    fn lhm_examples() {
        let t = lhm_target(Array2::from_elem((2, 2), 1.0 / 9.0).view()).unwrap();
        let l = loss_lhm(Array2::zeros((2, 2)).view(), &t, 1.0, 2).unwrap();
        assert!((l.loss - 2.0 * LN_2).abs() < 1e-12);

        let t1 = lhm_target(array![[0.3]].view()).unwrap();
        assert_eq!(loss_lhm(array![[0.7]].view(), &t1, 1.0, 1).unwrap().loss, 0.0);
    }

    #[test]
    fn lhm_sharpens_with_temperature() {
        let s = Array2::<f64>::eye(3);
        let t = lhm_target(Array2::zeros((3, 3)).view()).unwrap();
        let l: Vec<f64> = [1.0, 0.1, 0.01]
            .iter()
            .map(|&tau| loss_lhm(s.view(), &t, tau, 3).unwrap().loss)
            .collect();
        assert!(l[0] > l[1] && l[1] > l[2], "{l:?}");
    }

    #[test]
    fn infonce_examples() {
        assert!((loss_infonce(Array2::zeros((2, 2)).view(), 1.0).unwrap() - 2.0 * LN_2).abs() < 1e-12);
        assert_eq!(loss_infonce(array![[3.0]].view(), 1.0).unwrap(), 0.0);
        let v = loss_infonce((Array2::<f64>::eye(2) * 10.0).view(), 0.5).unwrap();
        let expect = 2.0 * (-20.0f64).exp().ln_1p();
        assert!((v - expect).abs() < 1e-6 * expect, "{v} vs {expect}");
    }

    #[test]
    fn total_examples() {
        assert_eq!(loss_total(1.5, 2.0, 3.0, 0.0).unwrap(), 1.5);
        assert_eq!(loss_total(0.0, 1.0, 2.0, 1.0).unwrap(), 3.0);
        assert_eq!(loss_total(1.0, 1.0, 1.0, 0.5).unwrap(), 2.0);
        assert!(loss_total(f64::NAN, 1.0, 1.0, 0.5).is_err());
    }
}
