//! Conditional log-likelihood and the full profile empirical log-likelihood.
//!
//! The full profile log EL splits as `ℓ(N, α, γ) = h1(N, α) + h2(γ) +
//! min_λ h3(α, γ12, λ)` where
//!
//! * `h1 = log C(N, n) + (N - n) log(1 - α)` is the binomial count term,
//! * `h2 = Σ [log Φ(v_i) - ½ log(τ² + s_i²) - (θ_i - θ)² / (2(τ² + s_i²))]`,
//! * `h3 = -Σ log*(1 + λ(Φ_i - α))` with `Φ_i = Φ(γ1 + γ2/s_i)`.
//!
//! `h3` is minimized over `λ` with the pseudo-logarithm; at the interior
//! solution `log*` coincides with `log` whenever `c_n >= n`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    idx, log_star, log_star_d1, log_star_d2, selection_index, v_raw, FullParams, SelectionParams, StudyRecord,
};
use crate::optimize::{brent_min, brent_root};
use crate::special::{log_std_normal_cdf, std_normal_cdf};

const LAMBDA_MAX_ITER: usize = 200;
const LAMBDA_TOL: f64 = 1e-12;

/// How the multiplier equation was resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LambdaStatus {
    /// Unique interior root of the multiplier equation.
    Interior,
    /// Every `Φ_i - α` is zero: `λ = 0` and uniform weights are feasible.
    Degenerate,
    /// Every `Φ_i - α` shares one sign: `α` lies outside the convex hull of
    /// the `Φ_i`, no feasible weights exist and the profile EL is `-∞`.
    Infeasible,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaSolution {
    pub lambda: f64,
    pub status: LambdaStatus,
}

impl LambdaSolution {
    pub fn is_boundary(&self) -> bool {
        self.status != LambdaStatus::Interior
    }
}

/// Empirical-likelihood masses on the observed standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ELWeights {
    pub p: Vec<f64>,
    pub lambda: f64,
    pub boundary: bool,
}

/// `Φ(γ1 + γ2/s_i)` for each study.
pub fn selection_probs(gamma1: f64, gamma2: f64, studies: &[StudyRecord]) -> Vec<f64> {
    studies.iter().map(|s| std_normal_cdf(selection_index(gamma1, gamma2, s.se))).collect()
}

/// Residual of the multiplier equation with `log*` smoothing:
/// `Σ d_i log*'(1 + λ d_i)`. Equals `Σ d_i / (1 + λ d_i)` inside the hull.
fn lambda_residual(lambda: f64, d: &[f64], c_n: f64) -> (f64, f64) {
    d.iter().fold((0.0, 0.0), |(r, dr), &di| {
        let z = 1.0 + lambda * di;
        (r + di * log_star_d1(z, c_n), dr + di * di * log_star_d2(z, c_n))
    })
}

/// Solves `Σ (Φ_i - α) / (1 + λ(Φ_i - α)) = 0` for given selection
/// probabilities, by bracketed Newton iteration.
pub fn solve_lambda_phi(alpha: f64, phis: &[f64], c_n: f64) -> LambdaSolution {
    let d: Vec<f64> = phis.iter().map(|p| p - alpha).collect();
    let d_max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let d_min = d.iter().copied().fold(f64::INFINITY, f64::min);
    if d_max.abs() < 1e-300 && d_min.abs() < 1e-300 {
        return LambdaSolution { lambda: 0.0, status: LambdaStatus::Degenerate };
    }
    if d_min >= 0.0 || d_max <= 0.0 {
        return LambdaSolution { lambda: 0.0, status: LambdaStatus::Infeasible };
    }

    // Residual is strictly decreasing on the whole line; the feasible
    // interval of the plain equation is (-1/d_max, -1/d_min).
    let mut lo = -1.0 / d_max;
    let mut hi = -1.0 / d_min;
    while lambda_residual(lo, &d, c_n).0 <= 0.0 {
        lo -= (hi - lo).max(1.0);
    }
    while lambda_residual(hi, &d, c_n).0 >= 0.0 {
        hi += (hi - lo).max(1.0);
    }

    let mut lambda = 0.0_f64.clamp(lo, hi);
    for _ in 0..LAMBDA_MAX_ITER {
        let (r, dr) = lambda_residual(lambda, &d, c_n);
        if r == 0.0 {
            break;
        }
        if r > 0.0 {
            lo = lambda;
        } else {
            hi = lambda;
        }
        let newton = lambda - r / dr;
        let next = if newton.is_finite() && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        let step = (next - lambda).abs();
        lambda = next;
        if step <= LAMBDA_TOL * (1.0 + lambda.abs()) {
            break;
        }
    }
    LambdaSolution { lambda, status: LambdaStatus::Interior }
}

/// Multiplier for the constraint `Σ p_i Φ(γ1 + γ2/s_i) = α`, with `c_n = n`.
pub fn solve_lambda(alpha: f64, gamma12: (f64, f64), studies: &[StudyRecord]) -> Result<LambdaSolution> {
    check_alpha(alpha)?;
    if studies.is_empty() {
        return Err(Error::TooFewStudies { got: 0, need: 1 });
    }
    let phis = selection_probs(gamma12.0, gamma12.1, studies);
    Ok(solve_lambda_phi(alpha, &phis, studies.len() as f64))
}

/// EL weights `p_i = n⁻¹ [1 + λ(Φ_i - α)]⁻¹` from given selection probabilities.
pub fn el_weights_phi(alpha: f64, phis: &[f64], c_n: f64) -> Result<ELWeights> {
    let sol = solve_lambda_phi(alpha, phis, c_n);
    if sol.status == LambdaStatus::Infeasible {
        return Err(Error::Infeasible { alpha });
    }
    let n = phis.len() as f64;
    let p = phis.iter().map(|phi| 1.0 / (n * (1.0 + sol.lambda * (phi - alpha)))).collect();
    Ok(ELWeights { p, lambda: sol.lambda, boundary: sol.is_boundary() })
}

pub fn el_weights(alpha: f64, gamma12: (f64, f64), studies: &[StudyRecord]) -> Result<ELWeights> {
    check_alpha(alpha)?;
    if studies.is_empty() {
        return Err(Error::TooFewStudies { got: 0, need: 1 });
    }
    let phis = selection_probs(gamma12.0, gamma12.1, studies);
    el_weights_phi(alpha, &phis, studies.len() as f64)
}

/// `min_λ h3(α, γ12, λ)`; `-∞` when `α` is outside the hull of the `Φ_i`.
pub fn h3_min(alpha: f64, phis: &[f64], c_n: f64) -> (f64, LambdaSolution) {
    let sol = solve_lambda_phi(alpha, phis, c_n);
    let value = match sol.status {
        LambdaStatus::Degenerate => 0.0,
        LambdaStatus::Infeasible => f64::NEG_INFINITY,
        LambdaStatus::Interior => h3_at(alpha, phis, sol.lambda, c_n),
    };
    (value, sol)
}

/// `h3` at a given `λ`, with `log*`.
pub fn h3_at(alpha: f64, phis: &[f64], lambda: f64, c_n: f64) -> f64 {
    -phis.iter().map(|phi| log_star(1.0 + lambda * (phi - alpha), c_n)).sum::<f64>()
}

#[inline]
pub(crate) fn h2_raw(g: &[f64; 5], studies: &[StudyRecord]) -> f64 {
    let tau2 = g[idx::TAU] * g[idx::TAU];
    studies
        .iter()
        .map(|s| {
            let var = tau2 + s.se * s.se;
            let r = s.effect - g[idx::THETA];
            log_std_normal_cdf(v_raw(g, s.effect, s.se)) - 0.5 * var.ln() - 0.5 * r * r / var
        })
        .sum()
}

#[inline]
pub(crate) fn cond_loglik_raw(g: &[f64; 5], studies: &[StudyRecord]) -> f64 {
    h2_raw(g, studies)
        - studies.iter().map(|s| log_std_normal_cdf(selection_index(g[idx::GAMMA1], g[idx::GAMMA2], s.se))).sum::<f64>()
}

fn check_v(g: &SelectionParams, studies: &[StudyRecord]) -> Result<()> {
    g.validate()?;
    for s in studies {
        crate::model::v_of(g, s)?;
    }
    Ok(())
}

/// `h2(γ)`: the selected-outcome part shared by the conditional and full
/// likelihoods.
pub fn h2(g: &SelectionParams, studies: &[StudyRecord]) -> Result<f64> {
    check_v(g, studies)?;
    finite(h2_raw(&g.to_array(), studies), "h2")
}

/// Conditional log-likelihood `Σ log{f1 f2 / f3}` (constants dropped).
pub fn cond_loglik(g: &SelectionParams, studies: &[StudyRecord]) -> Result<f64> {
    check_v(g, studies)?;
    finite(cond_loglik_raw(&g.to_array(), studies), "conditional log-likelihood")
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// `log C(N, n)` for real `N >= n`, as `Σ_k log(1 + (N - n)/k)`.
pub(crate) fn log_binom(n_total: f64, n: usize) -> f64 {
    let extra = n_total - n as f64;
    (1..=n).map(|k| (extra / k as f64).ln_1p()).sum()
}

/// `h1` for real-valued `N`, unchecked.
#[inline]
pub(crate) fn h1_cont(n_total: f64, alpha: f64, n: usize) -> f64 {
    let extra = n_total - n as f64;
    let tail = if extra == 0.0 { 0.0 } else { extra * (-alpha).ln_1p() };
    log_binom(n_total, n) + tail
}

/// `h1(N, α) = log C(N, n) + (N - n) log(1 - α)`.
pub fn h1(n_total: u64, alpha: f64, n: usize) -> Result<f64> {
    check_alpha(alpha)?;
    if n == 0 || (n_total as usize) < n {
        return Err(Error::Domain(format!("h1 requires N >= n >= 1, got N = {n_total}, n = {n}")));
    }
    Ok(h1_cont(n_total as f64, alpha, n))
}

/// `argmax_N h1(N, α) = floor(n/α)`; an exact tie resolves to the larger `N`.
pub fn h1_argmax(alpha: f64, n: usize) -> Result<u64> {
    check_alpha(alpha)?;
    let nf = n as f64;
    let mut m = (nf / alpha).floor().max(nf);
    // h1(M+1) - h1(M) >= 0  <=>  (M + 1)(1 - α) >= M + 1 - n
    while (m + 1.0) * (1.0 - alpha) >= m + 1.0 - nf {
        m += 1.0;
    }
    while m > nf && m * (1.0 - alpha) < m - nf {
        m -= 1.0;
    }
    Ok(m as u64)
}

/// The three additive pieces of the full profile log EL at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoglikTerms {
    pub h1: f64,
    pub h2: f64,
    pub h3: f64,
    pub lambda: f64,
    pub boundary: bool,
}

impl LoglikTerms {
    pub fn total(&self) -> f64 {
        self.h1 + self.h2 + self.h3
    }
}

pub fn full_profile_terms(fp: &FullParams, studies: &[StudyRecord], c_n: f64) -> Result<LoglikTerms> {
    if !(c_n > 0.0) {
        return Err(Error::Domain("c_n must be positive".into()));
    }
    let n = studies.len();
    let h1v = h1(fp.n_total, fp.alpha, n)?;
    let h2v = h2(&fp.gamma, studies)?;
    let phis = selection_probs(fp.gamma.gamma1, fp.gamma.gamma2, studies);
    let (h3v, sol) = h3_min(fp.alpha, &phis, c_n);
    Ok(LoglikTerms { h1: h1v, h2: h2v, h3: h3v, lambda: sol.lambda, boundary: sol.is_boundary() })
}

/// Full profile empirical log-likelihood `ℓ(N, α, γ)`; `-∞` when the EL
/// constraints are infeasible.
pub fn full_profile_loglik(fp: &FullParams, studies: &[StudyRecord], c_n: f64) -> Result<f64> {
    full_profile_terms(fp, studies, c_n).map(|t| t.total())
}

/// Maximizer of `h1 + h3` over the count and publication-rate parameters at
/// fixed selection probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct CountProfile {
    pub n_total: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub value: f64,
}

/// Profiles `(N, α, λ)` out of `h1 + h3` for one vector of selection
/// probabilities.
///
/// For fixed `N` the objective is concave in `α`, and its stationary point
/// satisfies `λ = (N - n) / (n(1 - α))` together with the multiplier
/// equation, which leaves a one-dimensional monotone root problem in `α`.
pub(crate) struct CountProfiler<'a> {
    phis: &'a [f64],
    n: usize,
    c_n: f64,
    alpha_lo: f64,
    alpha_hi: f64,
    phi_min: f64,
    phi_max: f64,
}

impl<'a> CountProfiler<'a> {
    pub fn new(phis: &'a [f64], c_n: f64, alpha_lo: f64, alpha_hi: f64) -> Self {
        let phi_min = phis.iter().copied().fold(f64::INFINITY, f64::min);
        let phi_max = phis.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        CountProfiler { phis, n: phis.len(), c_n, alpha_lo, alpha_hi, phi_min, phi_max }
    }

    fn infeasible(&self, n_total: f64) -> CountProfile {
        CountProfile { n_total, alpha: f64::NAN, lambda: f64::NAN, value: f64::NEG_INFINITY }
    }

    /// Value at fixed `(N, α)` through the multiplier solver.
    fn at(&self, n_total: f64, alpha: f64) -> CountProfile {
        let (h3v, sol) = h3_min(alpha, self.phis, self.c_n);
        CountProfile { n_total, alpha, lambda: sol.lambda, value: h1_cont(n_total, alpha, self.n) + h3v }
    }

    /// `max_α h1(N, α) + h̃3(α)` for real `N >= n`.
    pub fn best_alpha_for(&self, n_total: f64) -> CountProfile {
        let lo = self.alpha_lo.max(self.phi_min);
        let hi = self.alpha_hi.min(self.phi_max);
        if self.phi_max - self.phi_min < 1e-14 {
            let a = 0.5 * (self.phi_min + self.phi_max);
            if a < self.alpha_lo || a > self.alpha_hi {
                return self.infeasible(n_total);
            }
            return CountProfile { n_total, alpha: a, lambda: 0.0, value: h1_cont(n_total, a, self.n) };
        }
        if lo >= hi {
            return self.infeasible(n_total);
        }

        let nf = self.n as f64;
        let kappa_num = (n_total - nf) / nf;
        let phis = self.phis;
        let stationarity = |alpha: f64| -> f64 {
            let kappa = kappa_num / (1.0 - alpha);
            let mut g = 0.0;
            for &phi in phis {
                let d = phi - alpha;
                let z = 1.0 + kappa * d;
                if z <= 0.0 {
                    return -1e300;
                }
                g += d / z;
            }
            g
        };

        // boundary maxima when the stationary point is outside [α_lo, α_hi]
        if lo > self.phi_min && stationarity(lo) <= 0.0 {
            return self.at(n_total, lo);
        }
        if hi < self.phi_max && stationarity(hi) >= 0.0 {
            return self.at(n_total, hi);
        }

        let alpha = match brent_root(stationarity, lo, hi, 1e-15, 300) {
            Ok(a) => a,
            Err(_) => return self.scan_alpha(n_total, lo, hi),
        };
        let kappa = kappa_num / (1.0 - alpha);
        let zs_ok = self.phis.iter().all(|phi| 1.0 + kappa * (phi - alpha) > 1.0 / self.c_n);
        if !zs_ok {
            // log* active at the stationary point: maximize directly
            return self.scan_alpha(n_total, lo, hi);
        }
        let h3v = -self.phis.iter().map(|phi| (kappa * (phi - alpha)).ln_1p()).sum::<f64>();
        CountProfile { n_total, alpha, lambda: kappa, value: h1_cont(n_total, alpha, self.n) + h3v }
    }

    /// Direct Brent maximization over `α` with the multiplier solver.
    pub fn scan_alpha(&self, n_total: f64, lo: f64, hi: f64) -> CountProfile {
        let margin = 1e-12 * (hi - lo).max(1e-300);
        let (alpha, _) = brent_min(|a| -self.at(n_total, a).value, lo + margin, hi - margin, 1e-12, 500);
        self.at(n_total, alpha)
    }

    /// `max_{N integer, α} h1 + h̃3`. `n_max` caps `N`.
    pub fn best(&self, n_max: u64) -> CountProfile {
        let n = self.n as u64;
        let ipw: f64 = self.phis.iter().map(|p| 1.0 / p).sum();
        let start = (ipw.round() as u64).clamp(n, n_max.max(n));
        let eval = |k: u64| self.best_alpha_for(k as f64);
        let mut cur = eval(start);
        for dir in [1i64, -1] {
            loop {
                let k = cur.n_total as i64 + dir;
                if k < n as i64 || k as u64 > n_max {
                    break;
                }
                let cand = eval(k as u64);
                if cand.value > cur.value {
                    cur = cand;
                } else {
                    break;
                }
            }
        }
        cur
    }

    /// `h̃1(α) + h̃3(α)`: the count profiled at fixed `α`.
    pub fn at_alpha(&self, alpha: f64) -> CountProfile {
        let n_total = h1_argmax(alpha, self.n).map(|v| v as f64).unwrap_or(f64::NAN);
        if !n_total.is_finite() {
            return self.infeasible(n_total);
        }
        self.at(n_total, alpha)
    }
}
