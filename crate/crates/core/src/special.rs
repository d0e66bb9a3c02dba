//! Standard normal and chi-square special functions, plus small
//! statistical helpers shared by the inference and simulation layers.

use libm::erfc;
use statrs::function::erf::erfc_inv;
use statrs::function::gamma::gamma_lr;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Below this argument log Φ switches to the Mills-ratio continued fraction.
const LOG_CDF_TAIL: f64 = -8.0;

#[inline]
pub fn std_normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

#[inline]
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Upper-tail Mills ratio `(1 - Φ(t)) / φ(t)` for `t >= 8`, by the Laplace
/// continued fraction evaluated bottom-up.
fn mills_ratio_tail(t: f64) -> f64 {
    let mut r = t;
    for k in (1..=60).rev() {
        r = t + k as f64 / r;
    }
    1.0 / r
}

/// `log Φ(x)`, finite for every finite `x`.
pub fn log_std_normal_cdf(x: f64) -> f64 {
    if x > 0.0 {
        (-0.5 * erfc(x * std::f64::consts::FRAC_1_SQRT_2)).ln_1p()
    } else if x >= LOG_CDF_TAIL {
        std_normal_cdf(x).ln()
    } else {
        -0.5 * x * x - LN_SQRT_2PI + mills_ratio_tail(-x).ln()
    }
}

/// `φ(x) / Φ(x)` without underflow for large negative `x`.
pub fn inverse_mills(x: f64) -> f64 {
    if x >= LOG_CDF_TAIL {
        std_normal_pdf(x) / std_normal_cdf(x)
    } else {
        1.0 / mills_ratio_tail(-x)
    }
}

/// Standard normal quantile. Returns ±∞ at the endpoints.
pub fn std_normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

pub fn chi2_cdf(df: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        gamma_lr(0.5 * df, 0.5 * x)
    }
}

/// Chi-square quantile by bracketed bisection on the regularized lower
/// incomplete gamma function.
pub fn chi2_quantile(df: f64, p: f64) -> f64 {
    assert!(df > 0.0 && p > 0.0 && p < 1.0, "chi2_quantile: df > 0, 0 < p < 1");
    if df == 1.0 {
        let z = std_normal_quantile(0.5 + 0.5 * p);
        return z * z;
    }
    let mut lo = 0.0;
    let mut hi = df.max(1.0);
    while chi2_cdf(df, hi) < p {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chi2_cdf(df, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi.max(1.0) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// One-sample two-sided Kolmogorov-Smirnov statistic of `sample` against a
/// continuous reference distribution.
pub fn ks_statistic(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs: Vec<f64> = sample.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter().enumerate().fold(0.0_f64, |d, (i, &x)| {
        let f = cdf(x);
        let above = (i as f64 + 1.0) / n - f;
        let below = f - i as f64 / n;
        d.max(above).max(below)
    })
}

/// Asymptotic p-value of the KS statistic `d` for sample size `n`, with
/// Stephens' small-sample correction.
pub fn ks_pvalue(n: usize, d: f64) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=200 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-16 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Composite Simpson quadrature of φ over [0, x]; independent of erfc.
    fn cdf_by_quadrature(x: f64) -> f64 {
        let m = 20_000;
        let h = x / m as f64;
        let mut acc = std_normal_pdf(0.0) + std_normal_pdf(x);
        for k in 1..m {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * std_normal_pdf(k as f64 * h);
        }
        0.5 + acc * h / 3.0
    }

    #[test]
    fn cdf_known_values() {
        assert_eq!(std_normal_cdf(0.0), 0.5);
        assert!((std_normal_pdf(0.0) - 0.398_942_280_4).abs() < 1e-10);
        assert!((std_normal_cdf(1.959_963_985) - 0.975).abs() < 1e-9);
        assert!((cdf_by_quadrature(1.959_963_985) - 0.975).abs() < 1e-9);
        for &x in &[0.3, 1.0, 2.5, 4.0] {
            assert!((std_normal_cdf(x) - cdf_by_quadrature(x)).abs() < 1e-12, "x = {x}");
        }
    }

    #[test]
    fn cdf_symmetry() {
        for i in -400..=400 {
            let x = i as f64 * 0.025;
            assert!((std_normal_cdf(x) + std_normal_cdf(-x) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_cdf_matches_direct_and_tail() {
        for i in -300..=80 {
            let x = i as f64 * 0.1;
            let direct = std_normal_cdf(x).ln();
            let got = log_std_normal_cdf(x);
            assert!((got - direct).abs() <= 1e-12 * direct.abs().max(1.0), "x = {x}: {got} vs {direct}");
        }
        // far tail stays finite and follows -x^2/2 asymptotics
        let x = -200.0;
        let v = log_std_normal_cdf(x);
        let approx = -0.5 * x * x - LN_SQRT_2PI - (-x as f64).ln();
        assert!(v.is_finite() && (v - approx).abs() < 1e-4);
    }

    #[test]
    fn inverse_mills_is_continuous_at_switch() {
        let a = inverse_mills(LOG_CDF_TAIL + 1e-9);
        let b = inverse_mills(LOG_CDF_TAIL - 1e-9);
        assert!((a - b).abs() < 1e-6 * a);
    }

    #[test]
    fn quantiles() {
        assert!((std_normal_quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-12);
        assert!((chi2_quantile(1.0, 0.95) - 3.841_458_820_694_124).abs() < 1e-10);
        assert!((chi2_quantile(7.0, 0.95) - 14.067_140_449_340_169).abs() < 1e-9);
        assert!((chi2_cdf(7.0, chi2_quantile(7.0, 0.3)) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn ks_detects_shift() {
        let sample: Vec<f64> = (1..=500).map(|i| std_normal_quantile(i as f64 / 501.0)).collect();
        let d = ks_statistic(&sample, std_normal_cdf);
        assert!(ks_pvalue(sample.len(), d) > 0.99);
        let shifted: Vec<f64> = sample.iter().map(|x| x + 0.5).collect();
        let d = ks_statistic(&shifted, std_normal_cdf);
        assert!(ks_pvalue(shifted.len(), d) < 1e-6);
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let v = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(v), 2.0);
    }
}
