use statrs::function::erf::erfc_inv;

use crate::error::{Error, Result};

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Exact `W2` between two equal-size, equal-weight samples on the line:
/// the sorted pairing is optimal.
pub fn wasserstein2_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::UnequalSizes {
            left: a.len(),
            right: b.len(),
        });
    }
    let (a, b) = (sorted(a), sorted(b));
    let ss: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((ss / a.len() as f64).sqrt())
}

/// Exact `W2^2` between two equal-weight samples of any sizes on the line:
/// the integral over `u` of the squared difference of the quantile functions,
/// which are step functions with breaks at `k/n` and `l/m`.
pub fn w2_squared_quantile(a: &[f64], b: &[f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty());
    let (a, b) = (sorted(a), sorted(b));
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut acc = 0.0;
    while i < n && j < m {
        // Compare k/n with l/m exactly in integers.
        let (next_a, next_b) = ((i + 1) * m, (j + 1) * n);
        let end = next_a.min(next_b) as f64 / (n * m) as f64;
        acc += (end - u) * (a[i] - b[j]) * (a[i] - b[j]);
        u = end;
        if next_a <= next_b {
            i += 1;
        }
        if next_b <= next_a {
            j += 1;
        }
    }
    acc
}

/// Deterministic resampling to `n` points: the empirical quantiles at the
/// cell midpoints `(k + 1/2) / n`.
pub fn resample_quantiles(sample: &[f64], n: usize) -> Vec<f64> {
    assert!(!sample.is_empty() && n > 0);
    let s = sorted(sample);
    let m = s.len();
    (0..n)
        .map(|k| {
            let u = (k as f64 + 0.5) / n as f64;
            s[((u * m as f64).floor() as usize).min(m - 1)]
        })
        .collect()
}

fn std_normal_quantile(u: f64) -> f64 {
    if u <= 0.0 {
        f64::NEG_INFINITY
    } else if u >= 1.0 {
        f64::INFINITY
    } else {
        -std::f64::consts::SQRT_2 * erfc_inv(2.0 * u)
    }
}

fn std_normal_pdf(z: f64) -> f64 {
    if z.is_infinite() {
        0.0
    } else {
        (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
    }
}

/// `W2^2` between the empirical measure of `sample` and `N(mean, sd^2)`.
///
/// The `k`-th order statistic is transported onto the `k`-th quantile cell
/// of the Gaussian, and `int_cell z dPhi = phi(z_lo) - phi(z_hi)`.
pub fn w2_squared_to_gaussian(sample: &[f64], mean: f64, sd: f64) -> f64 {
    let s = sorted(sample);
    let n = s.len() as f64;
    if sd == 0.0 {
        return s.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    }
    let mut cross = 0.0;
    let mut second = 0.0;
    let mut phi_lo = 0.0;
    for (k, x) in s.iter().enumerate() {
        let phi_hi = std_normal_pdf(std_normal_quantile((k + 1) as f64 / n));
        cross += x * (mean / n + sd * (phi_lo - phi_hi));
        second += x * x / n;
        phi_lo = phi_hi;
    }
    (second - 2.0 * cross + mean * mean + sd * sd).max(0.0)
}

/// `eps_N = N^{-1/max(d,4)} (1 + ln N 1{d=4})^{1/2}`.
pub fn epsilon_rate(n: usize, d: usize) -> f64 {
    assert!(n >= 1 && d >= 1);
    let nf = n as f64;
    let base = nf.powf(-1.0 / d.max(4) as f64);
    if d == 4 {
        base * (1.0 + nf.ln()).sqrt()
    } else {
        base
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    /// OLS standard error of the slope (0 for exactly collinear points).
    pub stderr: f64,
}

/// Ordinary least squares of `ln value` on `ln n`.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<LogLogFit> {
    if points.len() < 3 {
        return Err(Error::invalid("points", "need at least 3 points"));
    }
    if let Some(&(n, value)) = points.iter().find(|p| !(p.1 > 0.0) || !(p.0 > 0.0)) {
        return Err(Error::NonPositiveValue { n, value });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let r = y - intercept - slope * x;
            r * r
        })
        .sum();
    Ok(LogLogFit {
        slope,
        intercept,
        stderr: (rss / (k - 2.0) / sxx).sqrt(),
    })
}

/// Mean and standard error (`sample std / sqrt(n)`).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn w2_examples() {
        assert_eq!(wasserstein2_1d(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(wasserstein2_1d(&[0.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(wasserstein2_1d(&[2.0, 0.0], &[1.0, 3.0]).unwrap(), 1.0);
        assert!(matches!(
            wasserstein2_1d(&[0.0], &[1.0, 2.0]),
            Err(Error::UnequalSizes { left: 1, right: 2 })
        ));
    }

    #[test]
    fn epsilon_examples() {
        assert_eq!(epsilon_rate(16, 1), 0.5);
        assert_abs_diff_eq!(epsilon_rate(16, 4), 0.5 * (1.0 + 16f64.ln()).sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(epsilon_rate(16, 4), 0.9712, epsilon = 1e-4);
        assert_eq!(epsilon_rate(1, 3), 1.0);
        assert_eq!(epsilon_rate(1, 4), 1.0);
    }

    #[test]
    fn slope_examples() {
        let pts: Vec<_> = [8.0, 16.0, 32.0, 64.0].iter().map(|&n: &f64| (n, n.powf(-0.5))).collect();
        assert_abs_diff_eq!(fit_loglog_slope(&pts).unwrap().slope, -0.5, epsilon = 1e-12);
        let flat: Vec<_> = [8.0, 16.0, 32.0].iter().map(|&n| (n, 3.0)).collect();
        assert_abs_diff_eq!(fit_loglog_slope(&flat).unwrap().slope, 0.0, epsilon = 1e-12);
        let inv: Vec<_> = [2.0, 4.0, 8.0].iter().map(|&n| (n, 4.0 / n)).collect();
        let f = fit_loglog_slope(&inv).unwrap();
        assert_abs_diff_eq!(f.slope, -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f.intercept, 4f64.ln(), epsilon = 1e-12);
        assert!(matches!(
            fit_loglog_slope(&[(1.0, 1.0), (2.0, 0.0), (3.0, 1.0)]),
            Err(Error::NonPositiveValue { .. })
        ));
    }

    #[test]
    fn gaussian_w2_matches_fine_quadrature() {
        let sample = [-1.3, 0.2, 0.25, 0.9, 2.4];
        let (m, s) = (0.3, 0.8);
        // Midpoint rule over the quantile function.
        let n = 200_000;
        let mut acc = 0.0;
        for k in 0..n {
            let u = (k as f64 + 0.5) / n as f64;
            let q = m + s * std_normal_quantile(u);
            let x = sample[((u * 5.0) as usize).min(4)];
            acc += (x - q) * (x - q);
        }
        assert_abs_diff_eq!(w2_squared_to_gaussian(&sample, m, s), acc / n as f64, epsilon = 1e-5);
        assert_abs_diff_eq!(w2_squared_to_gaussian(&[1.0, 3.0], 2.0, 0.0), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn quantile_w2_agrees_with_the_sorted_pairing() {
        let a = [0.3, -1.0, 2.5, 0.0];
        let b = [1.0, 1.5, -0.2, 0.7];
        let w = wasserstein2_1d(&a, &b).unwrap();
        assert_abs_diff_eq!(w2_squared_quantile(&a, &b), w * w, epsilon = 1e-14);
        // Duplicating every atom leaves the measure unchanged.
        let b2: Vec<f64> = b.iter().chain(b.iter()).copied().collect();
        assert_abs_diff_eq!(w2_squared_quantile(&a, &b2), w * w, epsilon = 1e-14);
        assert_abs_diff_eq!(w2_squared_quantile(&[0.0], &[-1.0, 1.0]), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn quantile_resampling() {
        let r = resample_quantiles(&[4.0, 1.0, 3.0, 2.0], 2);
        assert_eq!(r, vec![2.0, 4.0]);
        assert_eq!(resample_quantiles(&[5.0], 3), vec![5.0; 3]);
    }

    #[test]
    fn stderr_of_constant_is_zero() {
        assert_eq!(mean_stderr(&[2.0; 10]), (2.0, 0.0));
    }
}
