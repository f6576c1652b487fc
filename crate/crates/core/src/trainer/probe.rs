use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::log_sum_exp;

pub const PROBE_ITERS: usize = 500;
pub const PROBE_LR: f64 = 0.1;

/// Node indices of a train/validation/test partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle cut at rounded fractions; each part gets at least one node.
pub fn make_split(n: usize, fracs: (f64, f64, f64), seed: u64) -> Result<Split> {
    let (tr, va, te) = fracs;
    if [tr, va, te].iter().any(|f| !(*f > 0.0)) || ((tr + va + te) - 1.0).abs() > 1e-12 {
        return Err(Error::validation(format!(
            "split fractions must be positive and sum to 1, got ({tr}, {va}, {te})"
        )));
    }
    if n < 3 {
        return Err(Error::validation(format!("a three-way split needs at least 3 nodes, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((tr * n as f64).round() as usize).clamp(1, n - 2);
    let n_val = ((va * n as f64).round() as usize).clamp(1, n - n_train - 1);
    let mut parts = [
        order[..n_train].to_vec(),
        order[n_train..n_train + n_val].to_vec(),
        order[n_train + n_val..].to_vec(),
    ];
    for p in &mut parts {
        p.sort_unstable();
    }
    let [train, val, test] = parts;
    Ok(Split { train, val, test })
}

/// Multinomial logistic regression; the last row of `weights` is the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub weights: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeFit {
    pub probe: Probe,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
}

fn with_bias(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    let mut out = Array2::ones((n, d + 1));
    out.slice_mut(s![.., ..d]).assign(&x);
    out
}

fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let lse = log_sum_exp(row.iter().copied());
        row.mapv_inplace(|v| (v - lse).exp());
    }
}

impl Probe {
    pub fn num_classes(&self) -> usize {
        self.weights.ncols()
    }

    pub fn probabilities(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut p = with_bias(x).dot(&self.weights);
        softmax_rows(&mut p);
        p
    }

    /// Argmax class per row, lowest index on ties.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Vec<usize> {
        self.probabilities(x)
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                    .0
            })
            .collect()
    }

    pub fn accuracy(&self, x: ArrayView2<'_, f64>, labels: &[usize], idx: &[usize]) -> f64 {
        if idx.is_empty() {
            return f64::NAN;
        }
        let pred = self.predict(x.select(Axis(0), idx).view());
        let hits = pred.iter().zip(idx).filter(|(p, &i)| **p == labels[i]).count();
        hits as f64 / idx.len() as f64
    }

    /// Mean cross-entropy over `idx` and its gradient in the feature rows,
    /// with the weights held fixed. Rows outside `idx` get zero gradient.
    pub fn loss_and_input_grad(
        &self,
        x: ArrayView2<'_, f64>,
        labels: &[usize],
        idx: &[usize],
    ) -> (f64, Array2<f64>) {
        let d = x.ncols();
        let mut grad = Array2::zeros(x.raw_dim());
        let sub = x.select(Axis(0), idx);
        let logits = with_bias(sub.view()).dot(&self.weights);
        let w_feat = self.weights.slice(s![..d, ..]);
        let inv = 1.0 / idx.len() as f64;
        let mut loss = 0.0;
        for (r, &i) in idx.iter().enumerate() {
            let row = logits.row(r);
            let lse = log_sum_exp(row.iter().copied());
            loss += lse - row[labels[i]];
            let mut delta: Array1<f64> = row.mapv(|v| (v - lse).exp());
            delta[labels[i]] -= 1.0;
            grad.row_mut(i).scaled_add(inv, &w_feat.dot(&delta));
        }
        (loss * inv, grad)
    }
}

/// Full-batch gradient descent from zero weights on the training rows.
pub fn fit_probe_on(features: ArrayView2<'_, f64>, labels: &[usize], split: &Split) -> Result<ProbeFit> {
    if features.nrows() != labels.len() {
        return Err(Error::validation(format!(
            "{} feature rows but {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    if split.train.is_empty() {
        return Err(Error::validation("empty training split"));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut present = vec![false; classes];
    for &i in &split.train {
        present[labels[i]] = true;
    }
    if let Some(c) = present.iter().position(|p| !p) {
        return Err(Error::validation(format!("split error: class {c} is missing from the training split")));
    }

    let x = with_bias(features.select(Axis(0), &split.train).view());
    let mut y = Array2::zeros((split.train.len(), classes));
    for (r, &i) in split.train.iter().enumerate() {
        y[[r, labels[i]]] = 1.0;
    }
    let mut w = Array2::zeros((x.ncols(), classes));
    let inv = 1.0 / split.train.len() as f64;
    for _ in 0..PROBE_ITERS {
        let mut p = x.dot(&w);
        softmax_rows(&mut p);
        let g = x.t().dot(&(p - &y)) * inv;
        w.scaled_add(-PROBE_LR, &g);
    }
    let probe = Probe { weights: w };
    Ok(ProbeFit {
        train_acc: probe.accuracy(features, labels, &split.train),
        val_acc: probe.accuracy(features, labels, &split.val),
        test_acc: probe.accuracy(features, labels, &split.test),
        probe,
    })
}

/// Splits with `fracs` and `seed`, then fits.
pub fn fit_probe(features: ArrayView2<'_, f64>, labels: &[usize], fracs: (f64, f64, f64), seed: u64) -> Result<ProbeFit> {
    let split = make_split(features.nrows(), fracs, seed)?;
    fit_probe_on(features, labels, &split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn split_sizes_and_determinism() {
        let s = make_split(10, (0.6, 0.2, 0.2), 4).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
        assert_eq!(s, make_split(10, (0.6, 0.2, 0.2), 4).unwrap());
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(make_split(10, (0.5, 0.2, 0.2), 4).is_err());
    }

    #[test]
    fn separable_one_dimensional() {
        let x = Array2::from_shape_fn((20, 1), |(i, _)| if i % 2 == 0 { -1.0 - i as f64 * 0.1 } else { 1.0 + i as f64 * 0.1 });
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let fit = fit_probe(x.view(), &labels, (0.5, 0.25, 0.25), 1).unwrap();
        assert_eq!(fit.test_acc, 1.0);
    }

    #[test]
    fn constant_features_give_majority_rate() {
        let x = Array2::from_elem((20, 2), 0.5);
        let labels: Vec<usize> = (0..20).map(|i| usize::from(i % 4 == 0)).collect();
        let split = Split {
            train: (0..12).collect(),
            val: (12..16).collect(),
            test: (16..20).collect(),
        };
        let fit = fit_probe_on(x.view(), &labels, &split).unwrap();
        // three of every four training nodes are class 0
        assert_eq!(fit.train_acc, 0.75);
    }

    #[test]
    fn separated_gaussian_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let x = Array2::from_shape_fn((60, 2), |(i, k)| {
            let z: f64 = StandardNormal.sample(&mut rng);
            centers[labels[i]][k] + z
        });
        let fit = fit_probe(x.view(), &labels, (0.6, 0.2, 0.2), 3).unwrap();
        assert_eq!(fit.test_acc, 1.0);
    }

    #[test]
    fn missing_class_is_an_error() {
        let x = Array2::zeros((6, 1));
        let labels = vec![0, 0, 0, 0, 0, 1];
        let split = Split {
            train: vec![0, 1],
            val: vec![2, 3],
            test: vec![4, 5],
        };
        let err = fit_probe_on(x.view(), &labels, &split).unwrap_err();
        assert!(err.to_string().contains("split error"));
    }

    #[test]
    fn input_gradient_matches_differences() {
        let x = Array2::from_shape_fn((5, 2), |(i, k)| (i as f64 * 0.7 + k as f64).sin());
        let labels = vec![0, 1, 2, 0, 1];
        let split = Split {
            train: vec![0, 1, 2, 3],
            val: vec![4],
            test: vec![4],
        };
        let probe = fit_probe_on(x.view(), &labels, &split).unwrap().probe;
        let (_, g) = probe.loss_and_input_grad(x.view(), &labels, &split.train);
        let h = 1e-6;
        for i in 0..5 {
            for k in 0..2 {
                let mut p = x.clone();
                p[[i, k]] += h;
                let mut m = x.clone();
                m[[i, k]] -= h;
                let fd = (probe.loss_and_input_grad(p.view(), &labels, &split.train).0
                    - probe.loss_and_input_grad(m.view(), &labels, &split.train).0)
                    / (2.0 * h);
                assert!((fd - g[[i, k]]).abs() < 1e-8);
            }
        }
    }
}
