use ndarray::ArrayView2;
use serde::Serialize;

use crate::error::{Error, Result};

pub const MAX_BRUTEFORCE_N: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExactOt {
    /// `max_π (1/n) Σ_i s[i, π(i)]`.
    pub objective: f64,
    /// Lexicographically smallest maximizer.
    pub permutation: Vec<usize>,
}

/// Unregularized OT with uniform marginals by enumerating all `n!` permutations.
///
/// With uniform marginals the optimum sits at a vertex of the Birkhoff polytope,
/// i.e. a permutation matrix scaled by `1/n`.
pub fn exact_ot_bruteforce(s: ArrayView2<'_, f64>) -> Result<ExactOt> {
    let n = s.nrows();
    if n != s.ncols() || n == 0 {
        return Err(Error::validation(format!("expected a non-empty square matrix, got {:?}", s.shape())));
    }
    if n > MAX_BRUTEFORCE_N {
        return Err(Error::Range(format!(
            "brute-force OT limited to n <= {MAX_BRUTEFORCE_N}, got {n}"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = ExactOt {
        objective: f64::NEG_INFINITY,
        permutation: perm.clone(),
    };
    loop {
        let value = perm.iter().enumerate().map(|(i, &j)| s[[i, j]]).sum::<f64>() / n as f64;
        // lexicographic enumeration: the first strict maximum wins ties
        if value > best.objective {
            best.objective = value;
            best.permutation.clone_from(&perm);
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok(best)
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}
