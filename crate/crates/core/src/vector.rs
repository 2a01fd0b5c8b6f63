//! Small dense-vector helpers on `&[f64]`.

/// `x + a * y`, elementwise.
#[inline]
pub fn add_scaled(x: &[f64], a: f64, y: &[f64]) -> Vec<f64> {
    debug_assert_eq!(x.len(), y.len());
    x.iter().zip(y).map(|(xi, yi)| xi + a * yi).collect()
}

#[inline]
pub fn scale(a: f64, x: &[f64]) -> Vec<f64> {
    x.iter().map(|xi| a * xi).collect()
}

#[inline]
pub fn squared_distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

#[inline]
pub fn distance(x: &[f64], y: &[f64]) -> f64 {
    squared_distance(x, y).sqrt()
}

#[inline]
pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[inline]
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn all_finite(x: &[f64]) -> bool {
    x.iter().all(|v| v.is_finite())
}

/// Weighted sum `sum_k w[k] * vs[k]`, accumulated in index order.
pub fn weighted_sum(weights: &[f64], vs: &[Vec<f64>]) -> Vec<f64> {
    debug_assert_eq!(weights.len(), vs.len());
    let dim = vs.first().map_or(0, Vec::len);
    let mut out = vec![0.0; dim];
    for (w, v) in weights.iter().zip(vs) {
        for (o, vi) in out.iter_mut().zip(v) {
            *o += w * vi;
        }
    }
    out
}
