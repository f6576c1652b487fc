//! Desk-scale alignment training on free embedding tables.
//!
//! The structural and textual embeddings are optimized directly by plain
//! gradient descent on `L_NC + λ (L_MHA + L_LHM)`. `L_NC` comes from a linear
//! probe on `[h_struct | h_text]` whose weights are refit periodically and held
//! fixed in between.

mod align;
mod probe;

pub use align::{
    align, latent_recovery_score, recovery_score, AlignState, ProbeRecord, StepLosses, TrainConfig, TrainTrace,
    DEFAULT_LR, DEFAULT_PROBE_EVERY, DEFAULT_REFRESH_EVERY, DEFAULT_SPLIT, DEFAULT_STEPS,
};
pub use probe::{fit_probe, fit_probe_on, make_split, Probe, ProbeFit, Split, PROBE_ITERS, PROBE_LR};
