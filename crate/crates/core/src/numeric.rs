//! Small numerical kernels on probability vectors.

/// `log Σ exp(x)` computed with max-subtraction.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Writes `softmax(scale * q)` into `out`.
pub fn softmax_scaled_into(q: &[f64], scale: f64, out: &mut [f64]) {
    debug_assert_eq!(q.len(), out.len());
    if scale == 0.0 {
        let u = 1.0 / q.len() as f64;
        out.iter_mut().for_each(|o| *o = u);
        return;
    }
    let max = q
        .iter()
        .map(|x| scale * x)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, x) in out.iter_mut().zip(q) {
        *o = (scale * x - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

pub fn softmax_scaled(q: &[f64], scale: f64) -> Vec<f64> {
    let mut out = vec![0.0; q.len()];
    softmax_scaled_into(q, scale, &mut out);
    out
}

/// Shannon entropy in nats, with `0 log 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// `KL(p ‖ q)`; `+∞` when `q` vanishes where `p` does not.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return f64::INFINITY;
            }
            total += a * (a / b).ln();
        }
    }
    total.max(0.0)
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

pub fn l1_distance(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum()
}

pub fn sup_distance(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Nonnegative and summing to one within `tol`.
pub fn is_simplex(p: &[f64], tol: f64) -> bool {
    !p.is_empty()
        && p.iter().all(|x| x.is_finite() && *x >= -tol)
        && (p.iter().sum::<f64>() - 1.0).abs() <= tol
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Least-squares slope of `ln y` against `ln x` over the points with both
/// coordinates positive; `None` with fewer than two such points.
pub fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if logs.len() < 2 {
        return None;
    }
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}
