//! Transport-weighted contrastive objectives and their gradients.
//!
//! Two plans drive the objectives. `Q*` couples the merged similarity `S` and
//! weights the affinities of the hard-negative loss ([`loss_mha`]). `Q̂*` couples
//! the global cosine `Ŝ` and becomes the soft positive target of the latent
//! homophily loss ([`loss_lhm`]). Both plans, and every retained negative set,
//! are constants for differentiation: [`FrozenState`] captures them once and
//! the loss is a smooth function of the embeddings until the next refresh.

mod audit;
mod fdcheck;
mod objectives;
mod pipeline;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::similarity::{PromptRule, DEFAULT_ALPHA, DEFAULT_BETA};
use crate::transport::OtConfig;

pub use audit::{proposition_audit, AuditFlags, AuditReport};
pub use fdcheck::{finite_difference_check, Coordinate, FdReport, Tensor, CANCELLATION_STEP, FD_SUBSET};
pub use objectives::{
    infonce_terms, lhm_sets, lhm_target, lhm_terms, loss_infonce, loss_lhm, loss_mha, loss_total, mha_terms,
    ot_affinity, retain_negatives, Affinity, LhmLoss, LhmTarget, NegativeSets, MAX_EXPONENT,
};
pub use pipeline::{
    contrastive_gradient, evaluate_frozen, freeze, loss_report, rsm_backward, similarities, Bundle, BundleGradient,
    ContrastiveValue, FrozenState, LossReport, PlanDiagnostics, RetainedNegatives, Similarities,
};

pub const DEFAULT_TAU: f64 = 0.5;
pub const DEFAULT_LAMBDA: f64 = 0.5;
pub const MAX_DEFAULT_NEG_COUNT: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    /// Retained set size per row; `None` means `min(N, 256)`.
    pub neg_count: Option<usize>,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub prompt: PromptRule,
    pub ot: OtConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: DEFAULT_TAU,
            neg_count: None,
            lambda: DEFAULT_LAMBDA,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            prompt: PromptRule::default(),
            ot: OtConfig::default(),
        }
    }
}

impl LossConfig {
    pub fn neg_count_for(&self, n: usize) -> usize {
        self.neg_count.unwrap_or(MAX_DEFAULT_NEG_COUNT).min(n)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::validation(format!("tau must be positive, got {}", self.tau)));
        }
        if self.neg_count == Some(0) {
            return Err(Error::validation("neg_count must be at least 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::validation(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::validation(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::validation(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }
}
