use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::objectives::{check_square, lhm_target, loss_infonce, loss_lhm, loss_mha, ot_affinity};
use super::LossConfig;
use crate::error::Result;
use crate::similarity::augment_values;
use crate::transport::{crop_plan, solve};

/// Whether the input meets the conditions the bound arguments rely on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditFlags {
    pub nonneg_similarity: bool,
    /// Each `s_ii` is the maximum of both row `i` and column `i`.
    pub diag_dominant: bool,
}

impl AuditFlags {
    pub fn all(&self) -> bool {
        self.nonneg_similarity && self.diag_dominant
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub l_mha: f64,
    pub l_lhm: f64,
    pub l_infonce: f64,
    /// `l_mha ≤ l_infonce`
    pub mha_bound_holds: bool,
    /// `l_lhm ≤ l_infonce`
    pub lhm_bound_holds: bool,
    pub assumptions: AuditFlags,
    pub neg_count: usize,
}

/// Evaluates the three losses on one similarity matrix with full negative sets
/// and reports the two orderings. The same matrix plays `S̄` and `Ŝ`, and one
/// transport plan on its prompt-augmented form serves as both `Q*` and `Q̂*`.
/// Never fails on a violated bound; only invalid input is an error.
pub fn proposition_audit(s: ArrayView2<'_, f64>, cfg: &LossConfig) -> Result<AuditReport> {
    cfg.validate()?;
    let n = check_square(s, "similarity")?;
    let aug = augment_values(s, &cfg.prompt)?;
    let sol = solve(aug.values(), &cfg.ot)?;
    let q = crop_plan(&sol, n)?;

    let l_mha = loss_mha(&ot_affinity(q.view(), s, cfg.tau, n)?);
    let l_lhm = loss_lhm(s, &lhm_target(q.view())?, cfg.tau, n)?.loss;
    let l_infonce = loss_infonce(s, cfg.tau)?;

    let diag_dominant = (0..n).all(|i| {
        let d = s[[i, i]];
        s.row(i).iter().all(|&v| v <= d) && s.column(i).iter().all(|&v| v <= d)
    });
    Ok(AuditReport {
        l_mha,
        l_lhm,
        l_infonce,
        mha_bound_holds: l_mha <= l_infonce,
        lhm_bound_holds: l_lhm <= l_infonce,
        assumptions: AuditFlags {
            nonneg_similarity: s.iter().all(|&v| v >= 0.0),
            diag_dominant,
        },
        neg_count: n,
    })
}
