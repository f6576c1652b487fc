use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_marginal, Plan, TransportSolution};
use crate::error::{Error, Result};

/// Below this ε the linear-space kernel `exp(S̄/ε)` spans too many orders of
/// magnitude for factored products.
pub const MIN_LOWRANK_EPSILON: f64 = 0.01;

const LANDMARK_ATTEMPTS: usize = 4;
const NNLS_MAX_SWEEPS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FactorMethod {
    /// Landmark-column (Nyström) factorization.
    Nystrom,
    /// `K = K · I · Iᵀ` when `rank = n`, Nyström otherwise.
    ExactWhenFullRank,
}

/// Non-negative factorization `K ≈ U Diag(Υ) Vᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelFactors {
    pub u: Array2<f64>,
    pub upsilon: Array1<f64>,
    pub v: Array2<f64>,
    /// `‖K − U Diag(Υ) Vᵀ‖_F / ‖K‖_F`, when the factors came from a known kernel.
    pub rel_frobenius_error: Option<f64>,
}

impl KernelFactors {
    pub fn new(u: Array2<f64>, upsilon: Array1<f64>, v: Array2<f64>) -> Result<Self> {
        let r = upsilon.len();
        if u.ncols() != r || v.ncols() != r || r == 0 {
            return Err(Error::validation(format!(
                "factor shapes disagree: U {:?}, Υ {r}, V {:?}",
                u.shape(),
                v.shape()
            )));
        }
        if u.iter().chain(v.iter()).any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::validation("kernel factors must be finite and non-negative"));
        }
        if upsilon.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::validation("kernel factor weights must be positive"));
        }
        Ok(KernelFactors {
            u,
            upsilon,
            v,
            rel_frobenius_error: None,
        })
    }

    pub fn rank(&self) -> usize {
        self.upsilon.len()
    }

    /// `K x`
    pub fn apply(&self, x: &Array1<f64>) -> Array1<f64> {
        let t = self.v.t().dot(x) * &self.upsilon;
        self.u.dot(&t)
    }

    /// `Kᵀ x`
    pub fn apply_t(&self, x: &Array1<f64>) -> Array1<f64> {
        let t = self.u.t().dot(x) * &self.upsilon;
        self.v.dot(&t)
    }

    pub fn reconstruct(&self) -> Array2<f64> {
        let scaled = &self.u * &self.upsilon.view().insert_axis(Axis(0));
        scaled.dot(&self.v.t())
    }

    /// Top-left block of `Diag(κ1) K Diag(κ2)`.
    pub(crate) fn plan_block(&self, kappa1: &Array1<f64>, kappa2: &Array1<f64>, n_keep: usize) -> Array2<f64> {
        let left = &self.u.slice(s![..n_keep, ..])
            * &self.upsilon.view().insert_axis(Axis(0))
            * &kappa1.slice(s![..n_keep]).insert_axis(Axis(1));
        let right = &self.v.slice(s![..n_keep, ..]) * &kappa2.slice(s![..n_keep]).insert_axis(Axis(1));
        left.dot(&right.t())
    }
}

/// Factorizes the max-shifted kernel `exp((S̄ − max S̄)/ε)`; the shift is a
/// constant factor the Sinkhorn scalings absorb.
///
/// Nyström picks `rank` landmark columns uniformly with `seed`: `U` holds those
/// kernel columns and `V` the non-negative least-squares coupling of every
/// column onto them, started from the classical `W⁻¹ R` solution. A singular
/// landmark block triggers up to three redraws before giving up.
pub fn factorize_kernel(
    sbar: &Array2<f64>,
    epsilon: f64,
    rank: usize,
    method: FactorMethod,
    seed: u64,
) -> Result<KernelFactors> {
    if !(epsilon >= MIN_LOWRANK_EPSILON) {
        return Err(Error::numerical(format!(
            "low-rank Sinkhorn requires epsilon >= {MIN_LOWRANK_EPSILON} (got {epsilon}); \
             use the dense solver for smaller epsilon"
        )));
    }
    let n = sbar.nrows();
    if !sbar.is_square() || n == 0 {
        return Err(Error::validation("kernel factorization expects a square matrix"));
    }
    if rank == 0 || rank > n {
        return Err(Error::Range(format!("rank must lie in 1..={n}, got {rank}")));
    }
    if sbar.iter().any(|x| !x.is_finite()) {
        return Err(Error::validation("similarity matrix has non-finite entries"));
    }
    let shift = sbar.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let kernel = sbar.mapv(|x| ((x - shift) / epsilon).exp());

    let (u, v) = if method == FactorMethod::ExactWhenFullRank && rank == n {
        (kernel.clone(), Array2::eye(n))
    } else {
        nystrom(&kernel, rank, seed)?
    };
    let mut factors = normalize_columns(u, v)?;
    let residual = &kernel - &factors.reconstruct();
    factors.rel_frobenius_error = Some(frobenius(&residual) / frobenius(&kernel));
    Ok(factors)
}

fn frobenius(m: &Array2<f64>) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn nystrom(kernel: &Array2<f64>, rank: usize, seed: u64) -> Result<(Array2<f64>, Array2<f64>)> {
    let n = kernel.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..LANDMARK_ATTEMPTS {
        let mut landmarks = rand::seq::index::sample(&mut rng, n, rank).into_vec();
        landmarks.sort_unstable();
        let c = kernel.select(Axis(1), &landmarks);
        let w = c.select(Axis(0), &landmarks);
        let r = kernel.select(Axis(0), &landmarks);
        let Some(x) = solve_landmarks(&w, &r) else {
            continue;
        };
        let gram = c.t().dot(&c);
        let rhs = c.t().dot(kernel);
        let mut vt = x.mapv(|z| z.max(0.0));
        for j in 0..n {
            let mut col = vt.column(j).to_owned();
            nnls_refine(&gram, &rhs.column(j).to_owned(), &mut col);
            vt.column_mut(j).assign(&col);
        }
        return Ok((c, vt.reversed_axes()));
    }
    Err(Error::numerical(format!(
        "singular landmark block after {LANDMARK_ATTEMPTS} draws; the kernel's numerical rank is below {rank}"
    )))
}

/// `W⁻¹ R`, or `None` if `W` is numerically singular.
fn solve_landmarks(w: &Array2<f64>, r: &Array2<f64>) -> Option<Array2<f64>> {
    let k = w.nrows();
    let wm = DMatrix::from_fn(k, k, |i, j| w[[i, j]]);
    let sv = wm.clone().singular_values();
    let smax = sv.max();
    let smin = sv.min();
    if !(smin > 1e-12 * smax) {
        return None;
    }
    let rm = DMatrix::from_fn(k, r.ncols(), |i, j| r[[i, j]]);
    let x = wm.lu().solve(&rm)?;
    if x.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(Array2::from_shape_fn((k, r.ncols()), |(i, j)| x[(i, j)]))
}

/// Coordinate descent on `min_{v ≥ 0} ½ vᵀ G v − bᵀ v`.
fn nnls_refine(gram: &Array2<f64>, b: &Array1<f64>, v: &mut Array1<f64>) {
    let r = v.len();
    let mut grad = gram.dot(&*v) - b;
    let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    for _ in 0..NNLS_MAX_SWEEPS {
        let mut max_step = 0.0f64;
        for l in 0..r {
            let gll = gram[[l, l]];
            if gll <= 0.0 {
                continue;
            }
            let new = (v[l] - grad[l] / gll).max(0.0);
            let delta = new - v[l];
            if delta != 0.0 {
                v[l] = new;
                grad.scaled_add(delta, &gram.column(l));
                max_step = max_step.max((delta * gll).abs());
            }
        }
        if max_step <= 1e-14 * scale {
            break;
        }
    }
}

/// Rescales each factor column to unit max, moving the scale into `Υ`, and
/// drops columns that vanished.
fn normalize_columns(u: Array2<f64>, v: Array2<f64>) -> Result<KernelFactors> {
    let mut keep = Vec::new();
    let mut weights = Vec::new();
    for l in 0..u.ncols() {
        let cu = u.column(l).iter().fold(0.0f64, |m, &x| m.max(x));
        let cv = v.column(l).iter().fold(0.0f64, |m, &x| m.max(x));
        if cu > 0.0 && cv > 0.0 {
            keep.push(l);
            weights.push(cu * cv);
        }
    }
    if keep.is_empty() {
        return Err(Error::numerical("kernel factorization collapsed to zero"));
    }
    let mut u = u.select(Axis(1), &keep);
    let mut v = v.select(Axis(1), &keep);
    for mut col in u.columns_mut().into_iter().chain(v.columns_mut()) {
        let m = col.iter().fold(0.0f64, |m, &x| m.max(x));
        col /= m;
    }
    // clamp rounding-level negatives left by the solve
    u.mapv_inplace(|x| x.max(0.0));
    v.mapv_inplace(|x| x.max(0.0));
    KernelFactors::new(u, Array1::from(weights), v)
}

/// Sinkhorn on factored kernel products, `O(n r)` per iteration.
pub fn sinkhorn_lowrank(
    factors: &KernelFactors,
    mu1: &Array1<f64>,
    mu2: &Array1<f64>,
    max_iters: usize,
    tol: f64,
) -> Result<TransportSolution> {
    let n = factors.u.nrows();
    let m = factors.v.nrows();
    check_marginal(mu1, n, "mu1")?;
    check_marginal(mu2, m, "mu2")?;
    if max_iters == 0 || !(tol > 0.0) {
        return Err(Error::validation("max_iters and tol must be positive"));
    }

    let mut kappa1 = Array1::<f64>::ones(n);
    let mut kappa2 = Array1::<f64>::ones(m);
    let mut row_error = f64::INFINITY;
    let mut col_error = f64::INFINITY;
    let mut iterations = 0;

    for it in 1..=max_iters {
        iterations = it;
        kappa1 = mu1 / &factors.apply(&kappa2);
        let kt1 = factors.apply_t(&kappa1);
        kappa2 = mu2 / &kt1;
        if kappa1.iter().chain(kappa2.iter()).any(|x| !x.is_finite()) {
            return Err(Error::numerical(format!(
                "non-finite low-rank Sinkhorn scaling at iteration {it}"
            )));
        }
        let rows = &kappa1 * &factors.apply(&kappa2);
        let cols = &kappa2 * &kt1;
        row_error = (&rows - mu1).mapv(f64::abs).sum();
        col_error = (&cols - mu2).mapv(f64::abs).sum();
        if row_error <= tol && col_error <= tol {
            break;
        }
    }

    Ok(TransportSolution {
        log_kappa1: kappa1.mapv(f64::ln),
        log_kappa2: kappa2.mapv(f64::ln),
        plan: Plan::Factored {
            factors: factors.clone(),
            kappa1,
            kappa2,
        },
        iterations_run: iterations,
        row_error,
        col_error,
        converged: row_error <= tol && col_error <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::{sinkhorn_dense, TransportProblem};
    use ndarray::array;
    use rand::Rng;

    fn random_sbar(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..=1.0))
    }

    fn uniform(n: usize) -> Array1<f64> {
        Array1::from_elem(n, 1.0 / n as f64)
    }

    #[test]
    fn full_rank_is_exact() {
        let sbar = random_sbar(4, 1);
        for method in [FactorMethod::ExactWhenFullRank, FactorMethod::Nystrom] {
            let f = factorize_kernel(&sbar, 0.5, 4, method, 3).unwrap();
            assert!(f.rel_frobenius_error.unwrap() <= 1e-10, "{method:?}: {:?}", f.rel_frobenius_error);
        }
    }

    #[test]
    fn separable_kernel_rank_one() {
        let a = [0.1, -0.4, 0.9, 0.3];
        let b = [0.0, 0.5, -0.2, 0.7];
        let sbar = Array2::from_shape_fn((4, 4), |(i, j)| a[i] + b[j]);
        let f = factorize_kernel(&sbar, 0.2, 1, FactorMethod::Nystrom, 11).unwrap();
        assert!(f.rel_frobenius_error.unwrap() <= 1e-8);
        let sol = sinkhorn_lowrank(&f, &uniform(4), &uniform(4), 50, 1e-12).unwrap();
        let q = sol.dense_plan();
        assert!(q.iter().all(|&x| (x - 1.0 / 16.0).abs() < 1e-8));
    }

    #[test]
    fn full_rank_matches_dense_plan() {
        let sbar = random_sbar(5, 2);
        let f = factorize_kernel(&sbar, 0.1, 5, FactorMethod::ExactWhenFullRank, 0).unwrap();
        let lr = sinkhorn_lowrank(&f, &uniform(5), &uniform(5), 10_000, 1e-13).unwrap();
        let p = TransportProblem::uniform(sbar, 0.1).unwrap().with_iters(10_000, 1e-13);
        let dense = sinkhorn_dense(&p).unwrap();
        let diff = (&lr.dense_plan() - &dense.dense_plan()).mapv(f64::abs);
        assert!(diff.iter().all(|&d| d <= 1e-8), "{diff:?}");
    }

    #[test]
    fn epsilon_floor_is_numerical_error() {
        let err = factorize_kernel(&random_sbar(3, 0), 0.001, 2, FactorMethod::Nystrom, 0).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
        assert!(err.to_string().contains("epsilon"));
    }

    #[test]
    fn rank_bounds() {
        let sbar = random_sbar(3, 0);
        assert!(matches!(
            factorize_kernel(&sbar, 0.1, 4, FactorMethod::Nystrom, 0),
            Err(Error::Range(_))
        ));
        assert!(factorize_kernel(&sbar, 0.1, 0, FactorMethod::Nystrom, 0).is_err());
    }

    #[test]
    fn singular_landmarks_give_up() {
        // all-ones kernel has numerical rank one
        let sbar = Array2::zeros((4, 4));
        let err = factorize_kernel(&sbar, 0.1, 2, FactorMethod::Nystrom, 0).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
    }

    #[test]
    fn factors_nonnegative_on_random_kernel() {
        let sbar = random_sbar(16, 4);
        let f = factorize_kernel(&sbar, 0.3, 4, FactorMethod::Nystrom, 4).unwrap();
        assert!(f.u.iter().chain(f.v.iter()).all(|&x| x >= 0.0));
        assert!(f.upsilon.iter().all(|&x| x > 0.0));
        assert!(f.rank() <= 4);
    }

    #[test]
    fn factored_products_match_reconstruction() {
        let f = KernelFactors::new(
            array![[1.0, 0.5], [0.2, 0.0], [0.3, 0.9]],
            array![2.0, 0.5],
            array![[0.1, 0.4], [0.0, 1.0], [0.7, 0.2]],
        )
        .unwrap();
        let k = f.reconstruct();
        let x = array![0.3, -1.0, 2.0];
        assert!((f.apply(&x) - k.dot(&x)).iter().all(|d| d.abs() < 1e-14));
        assert!((f.apply_t(&x) - k.t().dot(&x)).iter().all(|d| d.abs() < 1e-14));
    }
}
