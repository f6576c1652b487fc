use ndarray::Array2;
use proptest::prelude::*;

use tagalign::losses::{
    lhm_target, loss_infonce, loss_lhm, loss_mha, mha_terms, ot_affinity, proposition_audit, LossConfig,
    NegativeSets,
};
use tagalign::similarity::{augment_with_prompt, PromptRule, SimilarityKind, SimilarityMatrix};
use tagalign::transport::{crop_plan, solve};

fn square(max_n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Array2<f64>> {
    (1..=max_n).prop_flat_map(move |n| {
        prop::collection::vec(lo..hi, n * n).prop_map(move |v| Array2::from_shape_vec((n, n), v).unwrap())
    })
}

fn plan_like(n: usize, vals: &[f64]) -> Array2<f64> {
    let total: f64 = vals.iter().take(n * n).sum::<f64>().max(1e-12);
    Array2::from_shape_fn((n, n), |(i, j)| vals[i * n + j] / total)
}

proptest! {
    #[test]
    fn mha_is_nonnegative(s in square(7, -1.0, 1.0), vals in prop::collection::vec(0.0f64..1.0, 49), tau in 0.05f64..2.0, k in 1usize..8) {
        let n = s.nrows();
        let q = plan_like(n, &vals);
        let l = loss_mha(&ot_affinity(q.view(), s.view(), tau, k.min(n)).unwrap());
        prop_assert!(l >= 0.0);
        let single = loss_mha(&ot_affinity(q.view(), s.view(), tau, 1).unwrap());
        prop_assert!(single.abs() <= 1e-12);
    }

    #[test]
    fn larger_sets_never_lower_mha(x in square(7, -3.0, 3.0), picks in prop::collection::vec(any::<bool>(), 98), extra in any::<prop::sample::Index>()) {
        let n = x.nrows();
        let build = |off: usize| -> Vec<Vec<usize>> {
            (0..n).map(|i| (0..n).filter(|&j| j == i || picks[off + i * n + j]).collect()).collect()
        };
        let small = NegativeSets { rows: build(0), cols: build(49) };
        let mut big = small.clone();
        let i = extra.index(n);
        for j in 0..n {
            if !big.rows[i].contains(&j) {
                big.rows[i].push(j);
                big.rows[i].sort_unstable();
                break;
            }
        }
        let a = mha_terms(x.view(), &small);
        let b = mha_terms(x.view(), &big);
        prop_assert!(a.iter().zip(b.iter()).all(|(s, l)| l >= s));
        prop_assert!(b.mean().unwrap() >= a.mean().unwrap());
    }

    #[test]
    fn lhm_target_is_row_stochastic(vals in prop::collection::vec(0.0f64..1.0, 64), n in 1usize..8) {
        let t = lhm_target(plan_like(n, &vals).view()).unwrap();
        for r in t.p().rows() {
            prop_assert!((r.sum() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn lhm_ignores_constant_shift(s in square(7, -1.0, 1.0), vals in prop::collection::vec(0.0f64..1.0, 49), c in -3.0f64..3.0, tau in 0.1f64..2.0) {
        let n = s.nrows();
        let t = lhm_target(plan_like(n, &vals).view()).unwrap();
        let a = loss_lhm(s.view(), &t, tau, n).unwrap().loss;
        let b = loss_lhm(s.mapv(|v| v + c).view(), &t, tau, n).unwrap().loss;
        prop_assert!((a - b).abs() <= 1e-9);
    }

    #[test]
    fn infonce_ignores_constant_shift(s in square(7, -1.0, 1.0), c in -3.0f64..3.0, tau in 0.1f64..2.0) {
        let a = loss_infonce(s.view(), tau).unwrap();
        let b = loss_infonce(s.mapv(|v| v + c).view(), tau).unwrap();
        prop_assert!((a - b).abs() <= 1e-9);
    }

    #[test]
    fn audit_reports_standalone_values(s in square(6, -1.0, 1.0)) {
        let cfg = LossConfig::default();
        let n = s.nrows();
        let audit = proposition_audit(s.view(), &cfg).unwrap();

        let m = SimilarityMatrix::new(s.clone(), SimilarityKind::Merged).unwrap();
        let aug = augment_with_prompt(&m, &PromptRule::default()).unwrap();
        let q = crop_plan(&solve(aug.values(), &cfg.ot).unwrap(), n).unwrap();
        let mha = loss_mha(&ot_affinity(q.view(), s.view(), cfg.tau, n).unwrap());
        let lhm = loss_lhm(s.view(), &lhm_target(q.view()).unwrap(), cfg.tau, n).unwrap().loss;
        let nce = loss_infonce(s.view(), cfg.tau).unwrap();
        prop_assert_eq!(audit.l_mha.to_bits(), mha.to_bits());
        prop_assert_eq!(audit.l_lhm.to_bits(), lhm.to_bits());
        prop_assert_eq!(audit.l_infonce.to_bits(), nce.to_bits());
        prop_assert_eq!(audit.neg_count, n);
    }
}
