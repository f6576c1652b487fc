//! Small numerically stable reductions used across the crate.

use ndarray::ArrayView1;

/// `log Σ exp(x)` with the max shifted out. Returns `-inf` for an empty input.
pub fn log_sum_exp<I>(xs: I) -> f64
where
    I: IntoIterator<Item = f64>,
    I::IntoIter: Clone,
{
    let it = xs.into_iter();
    let m = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || !m.is_finite() {
        return m;
    }
    m + it.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax of `xs`, written into `out`.
pub fn softmax_into(xs: &[f64], out: &mut Vec<f64>) {
    out.clear();
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    out.extend(xs.iter().map(|&x| (x - m).exp()));
    let z: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= z;
    }
}

pub fn dot(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.dot(&b)
}

pub fn norm(a: ArrayView1<'_, f64>) -> f64 {
    a.dot(&a).sqrt()
}

/// Cosine similarity; `None` when either vector has zero norm.
pub fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}
