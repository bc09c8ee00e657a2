//! Small numerical helpers shared across modules.

/// Pairwise (cascade) summation with a fixed reduction tree, so the result
/// depends only on the order of `values`, never on how callers produced them.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 64;
    if values.len() <= BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// `sum_i a_i b_i` with pairwise summation.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let prods: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    pairwise_sum(&prods)
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > 0.0 && n >= 1);
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Ordinary least-squares line `y = intercept + slope x`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LineFit {
    pub intercept: f64,
    pub slope: f64,
    /// Root-mean-square residual.
    pub rms_residual: f64,
}

pub fn fit_line(x: &[f64], y: &[f64]) -> LineFit {
    assert_eq!(x.len(), y.len());
    assert!(x.len() >= 2, "need at least two points for a line fit");
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rms = (x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    LineFit {
        intercept,
        slope,
        rms_residual: rms,
    }
}

/// Least-squares line through the origin `y = slope x`; returns `(slope, rms residual)`.
pub fn fit_through_origin(x: &[f64], y: &[f64]) -> (f64, f64) {
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let slope = sxy / sxx;
    let rms = (x.iter().zip(y).map(|(a, b)| (b - slope * a).powi(2)).sum::<f64>() / x.len() as f64).sqrt();
    (slope, rms)
}

/// Fit of `y = A t^alpha + B t`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PowerLinearFit {
    pub coefficient: f64,
    pub exponent: f64,
    pub linear: f64,
    /// RMS of the pointwise relative residuals.
    pub relative_residual: f64,
}

/// Profile least squares for `y = A t^alpha + B t` with `alpha` searched on
/// `[lo, hi]` by golden section. With `B` negligible this reduces to the
/// usual log-log slope.
pub fn fit_power_plus_linear(t: &[f64], y: &[f64], lo: f64, hi: f64) -> PowerLinearFit {
    assert_eq!(t.len(), y.len());
    assert!(t.len() >= 3);
    // scale rows by 1/|y| so each point counts by relative error
    let w: Vec<f64> = y.iter().map(|v| 1.0 / v.abs().max(1e-300)).collect();
    let objective = |alpha: f64| -> (f64, f64, f64) {
        let (mut suu, mut suv, mut svv, mut suy, mut svy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..t.len() {
            let u = t[i].powf(alpha) * w[i];
            let v = t[i] * w[i];
            let yy = y[i] * w[i];
            suu += u * u;
            suv += u * v;
            svv += v * v;
            suy += u * yy;
            svy += v * yy;
        }
        let det = suu * svv - suv * suv;
        let (a, b) = if det.abs() <= 1e-14 * suu * svv {
            (suy / suu, 0.0)
        } else {
            ((suy * svv - svy * suv) / det, (svy * suu - suy * suv) / det)
        };
        let ss: f64 = (0..t.len())
            .map(|i| (y[i] * w[i] - a * t[i].powf(alpha) * w[i] - b * t[i] * w[i]).powi(2))
            .sum();
        (a, b, ss)
    };
    // coarse scan, then golden section around the best cell
    let steps = 200;
    let mut best = (lo, f64::INFINITY);
    for k in 0..=steps {
        let al = lo + (hi - lo) * k as f64 / steps as f64;
        let ss = objective(al).2;
        if ss < best.1 {
            best = (al, ss);
        }
    }
    let h = (hi - lo) / steps as f64;
    let (mut a, mut b) = ((best.0 - h).max(lo), (best.0 + h).min(hi));
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..100 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if objective(c).2 < objective(d).2 {
            b = d;
        } else {
            a = c;
        }
    }
    let alpha = 0.5 * (a + b);
    let (coef, lin, ss) = objective(alpha);
    PowerLinearFit {
        coefficient: coef,
        exponent: alpha,
        linear: lin,
        relative_residual: (ss / t.len() as f64).sqrt(),
    }
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive() {
        let v: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let naive: f64 = v.iter().sum();
        assert!((pairwise_sum(&v) - naive).abs() < 1e-12);
    }

    #[test]
    fn line_fit_recovers_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.5 * v).collect();
        let f = fit_line(&x, &y);
        assert!((f.intercept - 2.0).abs() < 1e-12);
        assert!((f.slope + 0.5).abs() < 1e-12);
        assert!(f.rms_residual < 1e-12);
    }

    #[test]
    fn power_plus_linear_recovers_parameters() {
        let t = logspace(1e-4, 1e-2, 8);
        let y: Vec<f64> = t.iter().map(|v| 1.4 * v.sqrt() - 8.0 * v).collect();
        let f = fit_power_plus_linear(&t, &y, 0.1, 0.95);
        assert!((f.exponent - 0.5).abs() < 1e-4, "{f:?}");
        assert!((f.coefficient - 1.4).abs() < 1e-3);
        assert!((f.linear + 8.0).abs() < 1e-1);
    }

    #[test]
    fn spearman_monotone() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [0.1, 0.5, 0.7, 3.0];
        assert!((spearman(&x, &y) - 1.0).abs() < 1e-12);
        let z = [3.0, 2.0, 1.0, 0.0];
        assert!((spearman(&x, &z) + 1.0).abs() < 1e-12);
    }
}
