use ndarray::{Array1, Array2, Zip};

use super::{Plan, TransportProblem, TransportSolution};
use crate::error::{Error, Result};

/// Log-domain Sinkhorn.
///
/// Alternates `κ1 ← μ1 ./ (K κ2)` and `κ2 ← μ2 ./ (Kᵀ κ1)` starting from
/// `κ2 = 𝟙`, storing `f = log κ1` and `g = log κ2` so every kernel product is a
/// row or column log-sum-exp. Stops once both marginal L1 errors are within
/// `tol`, or after `max_iters` sweeps.
pub fn sinkhorn_dense(p: &TransportProblem) -> Result<TransportSolution> {
    p.validate()?;
    let (n, m) = p.sbar.dim();
    let log_k = p.sbar.mapv(|x| x / p.epsilon);
    let log_mu1 = p.mu1.mapv(f64::ln);
    let log_mu2 = p.mu2.mapv(f64::ln);

    let mut f = Array1::<f64>::zeros(n);
    let mut g = Array1::<f64>::zeros(m);
    // row_lse(i, g) for the current g, shared by the error check and the next f update
    let mut r: Array1<f64> = (0..n).map(|i| row_lse(&log_k, i, &g)).collect();
    let mut row_error = f64::INFINITY;
    let mut col_error = f64::INFINITY;
    let mut iterations = 0;

    for it in 1..=p.max_iters {
        iterations = it;
        for i in 0..n {
            f[i] = log_mu1[i] - r[i];
        }
        for j in 0..m {
            g[j] = log_mu2[j] - col_lse(&log_k, j, &f);
        }
        if f.iter().chain(g.iter()).any(|x| x.is_nan() || *x == f64::INFINITY) {
            return Err(Error::numerical(format!(
                "non-finite Sinkhorn scaling at iteration {it}"
            )));
        }
        for i in 0..n {
            r[i] = row_lse(&log_k, i, &g);
        }
        row_error = (0..n).map(|i| ((f[i] + r[i]).exp() - p.mu1[i]).abs()).sum();
        // columns are matched by the g update up to rounding; measured only when rows pass
        if row_error <= p.tol {
            col_error = (0..m)
                .map(|j| ((g[j] + col_lse(&log_k, j, &f)).exp() - p.mu2[j]).abs())
                .sum();
            if col_error <= p.tol {
                break;
            }
        }
    }
    if row_error > p.tol {
        col_error = (0..m)
            .map(|j| ((g[j] + col_lse(&log_k, j, &f)).exp() - p.mu2[j]).abs())
            .sum();
    }

    let mut plan = Array2::zeros((n, m));
    Zip::indexed(&mut plan).and(&log_k).for_each(|(i, j), q, &lk| {
        *q = (f[i] + lk + g[j]).exp();
    });

    Ok(TransportSolution {
        log_kappa1: f,
        log_kappa2: g,
        plan: Plan::Dense(plan),
        iterations_run: iterations,
        row_error,
        col_error,
        converged: row_error <= p.tol && col_error <= p.tol,
    })
}

fn row_lse(log_k: &Array2<f64>, i: usize, g: &Array1<f64>) -> f64 {
    let row = log_k.row(i);
    let mx = row
        .iter()
        .zip(g.iter())
        .map(|(a, b)| a + b)
        .fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + row
        .iter()
        .zip(g.iter())
        .map(|(a, b)| (a + b - mx).exp())
        .sum::<f64>()
        .ln()
}

fn col_lse(log_k: &Array2<f64>, j: usize, f: &Array1<f64>) -> f64 {
    let col = log_k.column(j);
    let mx = col
        .iter()
        .zip(f.iter())
        .map(|(a, b)| a + b)
        .fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + col
        .iter()
        .zip(f.iter())
        .map(|(a, b)| (a + b - mx).exp())
        .sum::<f64>()
        .ln()
}
