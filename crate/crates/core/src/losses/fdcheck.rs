use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pipeline::{contrastive_gradient, evaluate_frozen, freeze, similarities, Bundle, BundleGradient};
use super::LossConfig;
use crate::error::{Error, Result};

/// Steps below this are dominated by floating-point cancellation.
pub const CANCELLATION_STEP: f64 = 1e-8;
/// Above this many coordinates a seeded subset of this size is checked.
pub const FD_SUBSET: usize = 10_000;

const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tensor {
    HStruct,
    HText,
    Neigh,
    Tokens,
}

/// One scalar entry of a bundle: `node` selects the set for ragged tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coordinate {
    pub tensor: Tensor,
    pub node: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_coordinate: Option<Coordinate>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coordinates_checked: usize,
    pub coordinates_total: usize,
    /// Set when `h` is small enough that differences are mostly rounding noise.
    pub cancellation_warning: bool,
}

fn coordinates(b: &Bundle) -> Vec<Coordinate> {
    let mut out = Vec::new();
    for (tensor, m) in [(Tensor::HStruct, &b.h_struct), (Tensor::HText, &b.h_text)] {
        for ((row, col), _) in m.indexed_iter() {
            out.push(Coordinate { tensor, node: row, row, col });
        }
    }
    for (tensor, sets) in [(Tensor::Neigh, &b.neigh), (Tensor::Tokens, &b.tokens)] {
        for (node, m) in sets.iter().enumerate() {
            for ((row, col), _) in m.indexed_iter() {
                out.push(Coordinate { tensor, node, row, col });
            }
        }
    }
    out
}

fn entry(b: &mut Bundle, c: Coordinate) -> &mut f64 {
    match c.tensor {
        Tensor::HStruct => &mut b.h_struct[[c.row, c.col]],
        Tensor::HText => &mut b.h_text[[c.row, c.col]],
        Tensor::Neigh => &mut b.neigh[c.node][[c.row, c.col]],
        Tensor::Tokens => &mut b.tokens[c.node][[c.row, c.col]],
    }
}

fn grad_at(g: &BundleGradient, c: Coordinate) -> f64 {
    match c.tensor {
        Tensor::HStruct => g.h_struct[[c.row, c.col]],
        Tensor::HText => g.h_text[[c.row, c.col]],
        Tensor::Neigh => g.neigh[c.node][[c.row, c.col]],
        Tensor::Tokens => g.tokens[c.node][[c.row, c.col]],
    }
}

/// Compares the analytic gradient of `L_MHA + L_LHM` with central differences
/// `(f(x+h) − f(x−h)) / 2h`. Plans and retained sets are frozen once at the
/// unperturbed bundle. Relative error is `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn finite_difference_check(b: &Bundle, cfg: &LossConfig, h: f64, seed: u64) -> Result<FdReport> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::validation(format!("step must be positive, got {h}")));
    }
    b.validate()?;
    let frozen = freeze(&similarities(b, cfg)?, cfg)?;
    let (_, grad) = contrastive_gradient(b, cfg, &frozen)?;

    let all = coordinates(b);
    let total = all.len();
    let chosen: Vec<Coordinate> = if total > FD_SUBSET {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, total, FD_SUBSET).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|k| all[k]).collect()
    } else {
        all
    };

    let f = |bundle: &Bundle| -> Result<f64> {
        Ok(evaluate_frozen(&similarities(bundle, cfg)?, &frozen, cfg)?.sum())
    };
    let mut work = b.clone();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_coordinate: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coordinates_checked: chosen.len(),
        coordinates_total: total,
        cancellation_warning: h < CANCELLATION_STEP,
    };
    for c in chosen {
        let x0 = *entry(&mut work, c);
        *entry(&mut work, c) = x0 + h;
        let fp = f(&work)?;
        *entry(&mut work, c) = x0 - h;
        let fm = f(&work)?;
        *entry(&mut work, c) = x0;
        let numeric = (fp - fm) / (2.0 * h);
        let analytic = grad_at(&grad, c);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        if report.worst_coordinate.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_coordinate = Some(c);
            report.analytic_at_worst = analytic;
            report.numeric_at_worst = numeric;
        }
    }
    Ok(report)
}
