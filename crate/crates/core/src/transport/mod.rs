//! Entropic optimal transport on similarity matrices.
//!
//! The plan maximizes `⟨Q, S̄⟩ + ε H(Q)` under marginal constraints, which has
//! the Gibbs form `Q = Diag(κ1) K Diag(κ2)` with `K = exp(S̄ / ε)`. Two solvers
//! compute the scalings:
//!
//! * [`sinkhorn_dense`] works in the log domain and is stable for small ε;
//! * [`sinkhorn_lowrank`] runs the same fixed point on a non-negative factorization
//!   `K ≈ U Diag(Υ) Vᵀ` in `O(n r)` per iteration. Factored products need a
//!   linear-space kernel, so this path refuses `ε < 0.01`.
//!
//! [`exact_ot_bruteforce`] enumerates permutations and serves as the ε → 0 oracle.

mod exact;
mod lowrank;
mod sinkhorn;

use ndarray::{s, Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use exact::{exact_ot_bruteforce, ExactOt, MAX_BRUTEFORCE_N};
pub use lowrank::{factorize_kernel, sinkhorn_lowrank, FactorMethod, KernelFactors, MIN_LOWRANK_EPSILON};
pub use sinkhorn::sinkhorn_dense;

pub const DEFAULT_EPSILON: f64 = 0.05;
pub const DEFAULT_MAX_ITERS: usize = 30;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct TransportProblem {
    pub sbar: Array2<f64>,
    pub epsilon: f64,
    pub mu1: Array1<f64>,
    pub mu2: Array1<f64>,
    pub max_iters: usize,
    pub tol: f64,
}

impl TransportProblem {
    /// Uniform marginals and default iteration budget.
    pub fn uniform(sbar: Array2<f64>, epsilon: f64) -> Result<Self> {
        let (n, m) = sbar.dim();
        Self::new(
            sbar,
            epsilon,
            Array1::from_elem(n, 1.0 / n as f64),
            Array1::from_elem(m, 1.0 / m as f64),
        )
    }

    pub fn new(sbar: Array2<f64>, epsilon: f64, mu1: Array1<f64>, mu2: Array1<f64>) -> Result<Self> {
        let p = TransportProblem {
            sbar,
            epsilon,
            mu1,
            mu2,
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_iters(mut self, max_iters: usize, tol: f64) -> Self {
        self.max_iters = max_iters;
        self.tol = tol;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = self.sbar.dim();
        if n == 0 || m == 0 {
            return Err(Error::validation("empty transport problem"));
        }
        if self.sbar.iter().any(|x| !x.is_finite()) {
            return Err(Error::validation("similarity matrix has non-finite entries"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::validation(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.max_iters == 0 || !(self.tol > 0.0) {
            return Err(Error::validation("max_iters and tol must be positive"));
        }
        check_marginal(&self.mu1, n, "mu1")?;
        check_marginal(&self.mu2, m, "mu2")
    }
}

pub(crate) fn check_marginal(mu: &Array1<f64>, len: usize, name: &str) -> Result<()> {
    if mu.len() != len {
        return Err(Error::validation(format!("{name} has length {}, expected {len}", mu.len())));
    }
    if mu.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::validation(format!("{name} has negative or non-finite entries")));
    }
    let total = mu.sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::validation(format!("{name} sums to {total}, expected 1")));
    }
    Ok(())
}

/// How the plan is held: materialized, or as scalings over kernel factors.
#[derive(Debug, Clone)]
pub enum Plan {
    Dense(Array2<f64>),
    Factored {
        factors: KernelFactors,
        kappa1: Array1<f64>,
        kappa2: Array1<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct TransportSolution {
    /// `log κ1`; the linear scalings can overflow for small ε.
    pub log_kappa1: Array1<f64>,
    pub log_kappa2: Array1<f64>,
    pub plan: Plan,
    pub iterations_run: usize,
    /// L1 distance between plan row sums and `mu1`.
    pub row_error: f64,
    /// L1 distance between plan column sums and `mu2`.
    pub col_error: f64,
    pub converged: bool,
}

impl TransportSolution {
    pub fn marginal_error(&self) -> f64 {
        self.row_error.max(self.col_error)
    }

    pub fn kappa1(&self) -> Array1<f64> {
        self.log_kappa1.mapv(f64::exp)
    }

    pub fn kappa2(&self) -> Array1<f64> {
        self.log_kappa2.mapv(f64::exp)
    }

    pub fn n(&self) -> usize {
        self.log_kappa1.len()
    }

    pub fn dense_plan(&self) -> Array2<f64> {
        match &self.plan {
            Plan::Dense(q) => q.clone(),
            Plan::Factored { factors, kappa1, kappa2 } => factors.plan_block(kappa1, kappa2, kappa1.len()),
        }
    }

    /// `⟨Q, S̄⟩`.
    pub fn objective(&self, sbar: ArrayView2<'_, f64>) -> f64 {
        (&self.dense_plan() * &sbar).sum()
    }
}

/// Top-left `n_keep × n_keep` block of the plan.
pub fn crop_plan(sol: &TransportSolution, n_keep: usize) -> Result<Array2<f64>> {
    let n = sol.n();
    if n_keep > n {
        return Err(Error::Range(format!("cannot keep {n_keep} rows of a {n}x{n} plan")));
    }
    Ok(match &sol.plan {
        Plan::Dense(q) => q.slice(s![..n_keep, ..n_keep]).to_owned(),
        Plan::Factored { factors, kappa1, kappa2 } => factors.plan_block(kappa1, kappa2, n_keep),
    })
}

/// Solver settings used by the alignment pipeline and the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OtConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    pub tol: f64,
    /// `None` runs the dense log-domain solver; `Some(r)` factorizes the kernel
    /// at rank `r` and runs the factored solver.
    pub rank: Option<usize>,
    pub method: FactorMethod,
    pub seed: u64,
}

impl Default for OtConfig {
    fn default() -> Self {
        OtConfig {
            epsilon: DEFAULT_EPSILON,
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
            rank: None,
            method: FactorMethod::ExactWhenFullRank,
            seed: 0,
        }
    }
}

/// Uniform-marginal solve of `sbar` with the configured path.
pub fn solve(sbar: &Array2<f64>, cfg: &OtConfig) -> Result<TransportSolution> {
    let problem = TransportProblem::uniform(sbar.clone(), cfg.epsilon)?.with_iters(cfg.max_iters, cfg.tol);
    match cfg.rank {
        None => sinkhorn_dense(&problem),
        Some(rank) => {
            let factors = factorize_kernel(&problem.sbar, cfg.epsilon, rank, cfg.method, cfg.seed)?;
            sinkhorn_lowrank(&factors, &problem.mu1, &problem.mu2, cfg.max_iters, cfg.tol)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn crop_uniform_plan() {
        let p = TransportProblem::uniform(Array2::zeros((3, 3)), 0.1).unwrap();
        let sol = sinkhorn_dense(&p).unwrap();
        let q = crop_plan(&sol, 2).unwrap();
        assert_eq!(q.dim(), (2, 2));
        assert!(q.iter().all(|&x| (x - 1.0 / 9.0).abs() < 1e-15));
        assert_eq!(crop_plan(&sol, 3).unwrap(), sol.dense_plan());
        assert!(matches!(crop_plan(&sol, 4), Err(Error::Range(_))));
    }

    #[test]
    fn prompt_absorbs_unalignable_row() {
        // Row 2's in-block similarities sit far below the prompt value 0.5.
        let sbar = array![
            [1.0, 0.2, 0.1, 0.5],
            [0.2, 1.0, 0.1, 0.5],
            [-0.5, -0.5, -0.5, 0.5],
            [0.5, 0.5, 0.5, 0.5],
        ];
        let p = TransportProblem::uniform(sbar, 0.1).unwrap().with_iters(10_000, 1e-10);
        let sol = sinkhorn_dense(&p).unwrap();
        assert!(sol.converged, "{} {} {}", sol.row_error, sol.col_error, sol.iterations_run);
        let q = crop_plan(&sol, 3).unwrap();
        let rows: Vec<f64> = q.rows().into_iter().map(|r| r.sum()).collect();
        assert!(rows[2] < rows[0] && rows[2] < rows[1], "{rows:?}");
        for (r, mu) in rows.iter().zip([0.25; 3]) {
            assert!(*r <= mu + 1e-9);
        }
    }

    #[test]
    fn marginal_validation() {
        let bad = TransportProblem::new(Array2::zeros((2, 2)), 0.1, array![0.7, 0.7], array![0.5, 0.5]);
        assert!(bad.is_err());
        assert!(TransportProblem::uniform(Array2::zeros((2, 2)), 0.0).is_err());
    }
}
