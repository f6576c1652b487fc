use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::probe::{fit_probe_on, make_split, Probe, ProbeFit, Split};
use crate::data::Graph;
use crate::error::{Error, Result};
use crate::losses::{contrastive_gradient, evaluate_frozen, freeze, similarities, Bundle, FrozenState, LossConfig};
use crate::synth::{neighborhood_sets, SyntheticTag};

pub const DEFAULT_STEPS: usize = 200;
pub const DEFAULT_LR: f64 = 0.05;
pub const DEFAULT_REFRESH_EVERY: usize = 10;
pub const DEFAULT_PROBE_EVERY: usize = 25;
pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.6, 0.2, 0.2);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub loss: LossConfig,
    /// `(train, val, test)` fractions.
    pub split: (f64, f64, f64),
    /// Steps between transport plan and negative set refreshes.
    pub refresh_every: usize,
    /// Steps between probe refits.
    pub probe_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: DEFAULT_STEPS,
            lr: DEFAULT_LR,
            loss: LossConfig::default(),
            split: DEFAULT_SPLIT,
            refresh_every: DEFAULT_REFRESH_EVERY,
            probe_every: DEFAULT_PROBE_EVERY,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.refresh_every == 0 || self.probe_every == 0 {
            return Err(Error::validation("steps, refresh_every and probe_every must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::validation(format!("lr must be non-negative, got {}", self.lr)));
        }
        self.loss.validate()
    }
}

/// Loss values at one set of parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub l_total: f64,
    pub l_mha: f64,
    pub l_lhm: f64,
    pub l_nc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub step: usize,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    /// Losses before each step's update, one entry per step.
    pub losses: Vec<StepLosses>,
    pub probes: Vec<ProbeRecord>,
    /// Recovery of planted edges from the latent-homophily plan before training.
    pub initial_recovery: Option<f64>,
    /// The same score on a plan recomputed from the final embeddings.
    pub final_recovery: Option<f64>,
    /// Losses at the final embeddings with refreshed plans and probe.
    pub final_losses: StepLosses,
    #[serde(skip)]
    pub final_h_struct: Array2<f64>,
    #[serde(skip)]
    pub final_h_text: Array2<f64>,
}

/// Parameters, fixed inputs and the frozen pieces of the objective.
///
/// Neighborhood sets are rebuilt from the current structural embeddings, so
/// their gradients flow back into `h_struct`. Token sets stay fixed.
pub struct AlignState<'a> {
    graph: &'a Graph,
    labels: &'a [usize],
    tokens: Vec<Array2<f64>>,
    pub h_struct: Array2<f64>,
    pub h_text: Array2<f64>,
    pub split: Split,
    cfg: TrainConfig,
    frozen: Option<FrozenState>,
    probe: Option<Probe>,
}

impl<'a> AlignState<'a> {
    pub fn new(tag: &'a SyntheticTag, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let labels = tag.graph.require_labels()?;
        Ok(AlignState {
            graph: &tag.graph,
            labels,
            tokens: tag.tokens.as_slice().to_vec(),
            h_struct: tag.h_struct.values().clone(),
            h_text: tag.h_text.values().clone(),
            split: make_split(tag.graph.num_nodes(), cfg.split, cfg.seed)?,
            cfg: cfg.clone(),
            frozen: None,
            probe: None,
        })
    }

    pub fn bundle(&self) -> Bundle {
        Bundle {
            h_struct: self.h_struct.clone(),
            h_text: self.h_text.clone(),
            neigh: neighborhood_sets(self.graph, &self.h_struct),
            tokens: self.tokens.clone(),
        }
    }

    pub fn features(&self) -> Array2<f64> {
        concatenate(Axis(1), &[self.h_struct.view(), self.h_text.view()]).expect("equal row counts")
    }

    pub fn frozen(&self) -> Option<&FrozenState> {
        self.frozen.as_ref()
    }

    pub fn refresh_plans(&mut self) -> Result<()> {
        let b = self.bundle();
        self.frozen = Some(freeze(&similarities(&b, &self.cfg.loss)?, &self.cfg.loss)?);
        Ok(())
    }

    pub fn refit_probe(&mut self) -> Result<ProbeFit> {
        let fit = fit_probe_on(self.features().view(), self.labels, &self.split)?;
        self.probe = Some(fit.probe.clone());
        Ok(fit)
    }

    fn parts(&self) -> Result<(&FrozenState, &Probe)> {
        match (&self.frozen, &self.probe) {
            (Some(f), Some(p)) => Ok((f, p)),
            _ => Err(Error::validation("plans and probe must be initialized before evaluation")),
        }
    }

    fn combine(&self, l_mha: f64, l_lhm: f64, l_nc: f64) -> Result<StepLosses> {
        let l_total = crate::losses::loss_total(l_nc, l_mha, l_lhm, self.cfg.loss.lambda)?;
        Ok(StepLosses {
            l_total,
            l_mha,
            l_lhm,
            l_nc,
        })
    }

    /// Objective at the current parameters with plans, sets and probe frozen.
    pub fn evaluate(&self) -> Result<StepLosses> {
        let (frozen, probe) = self.parts()?;
        let b = self.bundle();
        let v = evaluate_frozen(&similarities(&b, &self.cfg.loss)?, frozen, &self.cfg.loss)?;
        let (l_nc, _) = probe.loss_and_input_grad(self.features().view(), self.labels, &self.split.train);
        self.combine(v.l_mha, v.l_lhm, l_nc)
    }

    /// Objective and its gradient in `(h_struct, h_text)`.
    pub fn gradient(&self) -> Result<(StepLosses, Array2<f64>, Array2<f64>)> {
        let (frozen, probe) = self.parts()?;
        let lambda = self.cfg.loss.lambda;
        let b = self.bundle();
        let (v, g) = contrastive_gradient(&b, &self.cfg.loss, frozen)?;
        let (l_nc, g_nc) = probe.loss_and_input_grad(self.features().view(), self.labels, &self.split.train);
        let d = self.h_struct.ncols();

        let mut g_struct = g.h_struct;
        for (i, nb) in self.graph.adjacency().iter().enumerate() {
            // row 0 of node i's set is i itself
            g_struct.row_mut(i).scaled_add(1.0, &g.neigh[i].row(0));
            for (r, &j) in nb.iter().enumerate() {
                g_struct.row_mut(j).scaled_add(1.0, &g.neigh[i].row(r + 1));
            }
        }
        g_struct *= lambda;
        g_struct += &g_nc.slice(s![.., ..d]);
        let mut g_text = g.h_text * lambda;
        g_text += &g_nc.slice(s![.., d..]);
        Ok((self.combine(v.l_mha, v.l_lhm, l_nc)?, g_struct, g_text))
    }

    pub fn apply(&mut self, g_struct: &Array2<f64>, g_text: &Array2<f64>, lr: f64) {
        self.h_struct.scaled_add(-lr, g_struct);
        self.h_text.scaled_add(-lr, g_text);
    }
}

/// Fraction of `pairs` `(i, j)` whose plan entry `q_ij` strictly exceeds the
/// median of row `i`'s off-diagonal entries.
pub fn recovery_score(pairs: &[(usize, usize)], plan: ArrayView2<'_, f64>) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric("no planted pairs to score".into()));
    }
    let n = plan.nrows();
    if plan.ncols() != n || n < 2 {
        return Err(Error::validation(format!("plan must be square with n >= 2, got {:?}", plan.shape())));
    }
    let mut medians = vec![None; n];
    let mut hits = 0usize;
    for &(i, j) in pairs {
        if i >= n || j >= n || i == j {
            return Err(Error::validation(format!("pair ({i}, {j}) is not an off-diagonal entry")));
        }
        let med = *medians[i].get_or_insert_with(|| {
            let mut off: Vec<f64> = (0..n).filter(|&k| k != i).map(|k| plan[[i, k]]).collect();
            off.sort_by(f64::total_cmp);
            let m = off.len();
            if m % 2 == 1 {
                off[m / 2]
            } else {
                0.5 * (off[m / 2 - 1] + off[m / 2])
            }
        });
        if plan[[i, j]] > med {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

/// [`recovery_score`] on the tag's deleted same-class edges.
pub fn latent_recovery_score(tag: &SyntheticTag, plan: ArrayView2<'_, f64>) -> Result<f64> {
    recovery_score(&tag.planted.deleted_edges, plan)
}

fn optional_recovery(tag: &SyntheticTag, plan: &Array2<f64>) -> Result<Option<f64>> {
    if tag.planted.deleted_edges.is_empty() {
        return Ok(None);
    }
    latent_recovery_score(tag, plan.view()).map(Some)
}

/// Runs `cfg.steps` plain gradient steps. Plans and retained sets are
/// refreshed every `refresh_every` steps, the probe every `probe_every`.
pub fn align(tag: &SyntheticTag, cfg: &TrainConfig) -> Result<TrainTrace> {
    let mut st = AlignState::new(tag, cfg)?;
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut probes = Vec::new();
    let mut initial_recovery = None;

    for step in 0..cfg.steps {
        if step % cfg.refresh_every == 0 {
            st.refresh_plans()?;
            if step == 0 {
                initial_recovery = optional_recovery(tag, &st.frozen().expect("just refreshed").q_hat)?;
            }
        }
        if step % cfg.probe_every == 0 {
            let fit = st.refit_probe()?;
            probes.push(ProbeRecord {
                step,
                train_acc: fit.train_acc,
                val_acc: fit.val_acc,
                test_acc: fit.test_acc,
            });
        }
        let (l, g_struct, g_text) = st.gradient().map_err(|e| match e {
            Error::Numerical(m) => Error::numerical(format!("training diverged at step {step}: {m}")),
            other => other,
        })?;
        if !l.l_total.is_finite() {
            return Err(Error::numerical(format!("training diverged at step {step}: non-finite loss")));
        }
        losses.push(l);
        st.apply(&g_struct, &g_text, cfg.lr);
    }

    st.refresh_plans()?;
    let final_recovery = optional_recovery(tag, &st.frozen().expect("just refreshed").q_hat)?;
    let fit = st.refit_probe()?;
    probes.push(ProbeRecord {
        step: cfg.steps,
        train_acc: fit.train_acc,
        val_acc: fit.val_acc,
        test_acc: fit.test_acc,
    });
    let final_losses = st.evaluate()?;
    Ok(TrainTrace {
        losses,
        probes,
        initial_recovery,
        final_recovery,
        final_losses,
        final_h_struct: st.h_struct,
        final_h_text: st.h_text,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};
    use ndarray::array;

    fn small_tag(seed: u64) -> SyntheticTag {
        generate(&SynthConfig {
            num_nodes: 12,
            dim: 8,
            intra_edge_prob: 0.5,
            seed,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn recovery_examples() {
        let uniform = Array2::from_elem((3, 3), 1.0 / 9.0);
        assert_eq!(recovery_score(&[(0, 1), (1, 2)], uniform.view()).unwrap(), 0.0);
        let peaked = array![[0.2, 0.5, 0.0], [0.0, 0.2, 0.5], [0.3, 0.0, 0.1]];
        assert_eq!(recovery_score(&[(0, 1), (1, 2)], peaked.view()).unwrap(), 1.0);
        assert!(matches!(recovery_score(&[], uniform.view()), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn zero_learning_rate_keeps_losses_constant() {
        let tag = small_tag(1);
        let cfg = TrainConfig {
            steps: 30,
            lr: 0.0,
            ..TrainConfig::default()
        };
        let trace = align(&tag, &cfg).unwrap();
        assert_eq!(trace.losses.len(), 30);
        assert!(trace.losses.iter().all(|l| *l == trace.losses[0]));
    }

    #[test]
    fn zero_lambda_ignores_contrastive_terms() {
        let tag = small_tag(2);
        let mut cfg = TrainConfig {
            steps: 1,
            ..TrainConfig::default()
        };
        cfg.loss.lambda = 0.0;
        let mut st = AlignState::new(&tag, &cfg).unwrap();
        st.refresh_plans().unwrap();
        st.refit_probe().unwrap();
        let (l, g_struct, g_text) = st.gradient().unwrap();
        assert_eq!(l.l_total, l.l_nc);
        assert!(l.l_mha > 0.0);
        let (_, g_nc) = st.probe.as_ref().unwrap().loss_and_input_grad(st.features().view(), st.labels, &st.split.train);
        let d = g_struct.ncols();
        assert_eq!(g_struct, g_nc.slice(s![.., ..d]));
        assert_eq!(g_text, g_nc.slice(s![.., d..]));
    }

    #[test]
    fn small_step_does_not_increase_objective() {
        for seed in 0..3 {
            let tag = small_tag(seed);
            let cfg = TrainConfig::default();
            let mut st = AlignState::new(&tag, &cfg).unwrap();
            st.refresh_plans().unwrap();
            st.refit_probe().unwrap();
            let (before, gs, gt) = st.gradient().unwrap();
            st.apply(&gs, &gt, 1e-6);
            let after = st.evaluate().unwrap();
            assert!(after.l_total <= before.l_total + 1e-10, "{before:?} -> {after:?}");
        }
    }

    #[test]
    fn state_gradient_matches_differences() {
        let tag = small_tag(5);
        let cfg = TrainConfig::default();
        let mut st = AlignState::new(&tag, &cfg).unwrap();
        st.refresh_plans().unwrap();
        st.refit_probe().unwrap();
        let (_, gs, gt) = st.gradient().unwrap();
        let h = 1e-5;
        for (which, i, k) in [(0, 0, 0), (0, 5, 3), (1, 2, 1), (1, 11, 7)] {
            let base = if which == 0 { st.h_struct[[i, k]] } else { st.h_text[[i, k]] };
            let mut eval = |v: f64| {
                if which == 0 {
                    st.h_struct[[i, k]] = v;
                } else {
                    st.h_text[[i, k]] = v;
                }
                st.evaluate().unwrap().l_total
            };
            let fd = (eval(base + h) - eval(base - h)) / (2.0 * h);
            eval(base);
            let an = if which == 0 { gs[[i, k]] } else { gt[[i, k]] };
            assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3), "{which} {i} {k}: {fd} vs {an}");
        }
    }

    #[test]
    fn align_is_deterministic() {
        let tag = small_tag(3);
        let cfg = TrainConfig {
            steps: 12,
            ..TrainConfig::default()
        };
        let a = align(&tag, &cfg).unwrap();
        let b = align(&tag, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
