//! Profile likelihood-ratio intervals for the full likelihood, conditional
//! Wald intervals, the IPW estimator `Ñ` and its variance, and the
//! publication-bias diagnosis.

use std::cell::Cell;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{
    cond_loglik_hessian, default_steps, maximize_masked, FitMode, FitReport, FullProblem, Likelihood, RHO_MAX,
};
use crate::likelihood::{full_profile_loglik, selection_probs, ELWeights};
use crate::model::{idx, FullParams, MetaDataset, SelectionParams, StudyRecord};
use crate::optimize::{brent_root, NelderMeadOptions};
use crate::special::{chi2_quantile, inverse_mills, std_normal_cdf, std_normal_quantile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamId {
    Theta,
    Tau,
    Rho,
    NTotal,
    Alpha,
}

impl ParamId {
    pub const ALL: [ParamId; 5] = [ParamId::Theta, ParamId::Tau, ParamId::Rho, ParamId::NTotal, ParamId::Alpha];

    pub fn name(self) -> &'static str {
        match self {
            ParamId::Theta => "theta",
            ParamId::Tau => "tau",
            ParamId::Rho => "rho",
            ParamId::NTotal => "N",
            ParamId::Alpha => "alpha",
        }
    }

    fn gamma_index(self) -> Option<usize> {
        match self {
            ParamId::Theta => Some(idx::THETA),
            ParamId::Tau => Some(idx::TAU),
            ParamId::Rho => Some(idx::RHO),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CiMethod {
    LR,
    Wald,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalEstimate {
    pub param_id: ParamId,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub method: CiMethod,
    /// The deviance never reached the threshold below the estimate; `lower`
    /// is the edge of the search range.
    pub lower_open: bool,
    pub upper_open: bool,
}

impl IntervalEstimate {
    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }

    pub fn excludes(&self, v: f64) -> bool {
        !self.contains(v)
    }
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.5 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("level must lie in (0.5, 1), got {level}")))
    }
}

/// Profile log-likelihood of the full model in one parameter.
pub struct Profiler {
    prob: FullProblem,
    mode: FitMode,
    xhat: [f64; 5],
    lhat: f64,
    n_hat: f64,
    alpha_hat: f64,
    steps: [f64; 5],
}

const PROFILE_EVALS: usize = 4000;
const ROOT_TOL: f64 = 1e-6;

impl Profiler {
    pub fn new(data: &MetaDataset, fit: &FitReport) -> Result<Self> {
        if fit.likelihood != Likelihood::Full {
            return Err(Error::Domain("profile intervals need a full-likelihood fit".into()));
        }
        if !fit.converged {
            return Err(Error::NotConverged("full-likelihood fit".into()));
        }
        let prob = FullProblem::new(data, fit.c_n);
        let xhat = fit.gamma.to_array();
        let n_hat = fit.n_total.ok_or_else(|| Error::Domain("fit has no N estimate".into()))? as f64;
        let alpha_hat = fit.alpha.ok_or_else(|| Error::Domain("fit has no alpha estimate".into()))?;
        let steps = default_steps(&prob.studies).map(|s| 0.5 * s);
        Ok(Profiler { lhat: fit.loglik, prob, mode: fit.mode, xhat, n_hat, alpha_hat, steps })
    }

    pub fn n(&self) -> usize {
        self.prob.n()
    }

    pub fn estimate(&self, param: ParamId) -> f64 {
        match param {
            ParamId::NTotal => self.n_hat,
            ParamId::Alpha => self.alpha_hat,
            p => self.xhat[p.gamma_index().unwrap()],
        }
    }

    fn free_mask(&self, fixed: Option<usize>) -> [bool; 5] {
        let mut free = [true; 5];
        if self.mode == FitMode::FixGamma12 {
            free[idx::GAMMA1] = false;
            free[idx::GAMMA2] = false;
        }
        if let Some(i) = fixed {
            free[i] = false;
        }
        free
    }

    /// `(ℓ_p(ψ), argmax γ)` warm-started from `warm`.
    ///
    /// Maximizing over integer `N` leaves kinks in `γ12`, so this uses the
    /// simplex method rather than a gradient search.
    pub fn profile_at(&self, param: ParamId, psi: f64, warm: [f64; 5]) -> (f64, [f64; 5]) {
        let prob = &self.prob;
        let opts = NelderMeadOptions { max_evals: PROFILE_EVALS, f_tol: 1e-10, x_tol: 1e-7, restarts: 2 };
        let (bx, steps) = (&prob.bx, self.steps);
        let m = match param {
            ParamId::NTotal => {
                maximize_masked(|x| prob.loglik_fixed_n(x, psi), warm, self.free_mask(None), bx, steps, &opts)
            }
            ParamId::Alpha => {
                maximize_masked(|x| prob.loglik_fixed_alpha(x, psi), warm, self.free_mask(None), bx, steps, &opts)
            }
            p => {
                let i = p.gamma_index().unwrap();
                let mut start = warm;
                start[i] = psi;
                let free = self.free_mask(Some(i));
                let m = maximize_masked(|x| prob.loglik(x), start, free, bx, steps, &opts);
                // the simplex can stall on the flat ridge; a smooth ascent from its answer may climb further
                let (_, p) = prob.stepwise(m.x, free);
                let v = prob.loglik(&p.x);
                if v > m.value {
                    return (v, p.x);
                }
                m
            }
        };
        (m.value, m.x)
    }

    /// Profile deviance `2{ℓ̂ - ℓ_p(ψ)}`, clamped at 0.
    pub fn deviance(&self, param: ParamId, psi: f64) -> f64 {
        let (v, _) = self.profile_at(param, psi, self.xhat);
        (2.0 * (self.lhat - v)).max(0.0)
    }

    fn range(&self, param: ParamId) -> (f64, f64) {
        let bx = &self.prob.bx;
        match param {
            ParamId::Theta => (bx.bounds[idx::THETA].lo, bx.bounds[idx::THETA].hi),
            ParamId::Tau => (0.0, bx.bounds[idx::TAU].hi),
            ParamId::Rho => (-RHO_MAX, RHO_MAX),
            ParamId::NTotal => (self.n() as f64, self.prob.n_max as f64),
            ParamId::Alpha => (self.prob.alpha_lo, self.prob.alpha_hi),
        }
    }

    fn initial_step(&self, param: ParamId) -> f64 {
        match param {
            ParamId::Theta => 0.02 + 0.05 * self.xhat[idx::TAU].abs(),
            ParamId::Tau => 0.02 + 0.05 * self.xhat[idx::TAU].abs(),
            ParamId::Rho => 0.05,
            ParamId::NTotal => (0.02 * self.n_hat).max(0.5),
            ParamId::Alpha => 0.01,
        }
    }

    /// Endpoint in direction `dir` (±1): walks outward with growing steps
    /// and warm starts until the deviance passes `q`, then solves
    /// `deviance = q` by Brent's method.
    fn endpoint(&self, param: ParamId, dir: f64, q: f64) -> (f64, bool) {
        let (lo, hi) = self.range(param);
        let edge = if dir > 0.0 { hi } else { lo };
        let start = self.estimate(param).clamp(lo, hi);
        if (edge - start).abs() < 1e-12 {
            return (edge, true);
        }
        let mut step = self.initial_step(param);
        let mut inner = (start, self.xhat);
        loop {
            let psi = start + dir * step;
            let psi = if dir > 0.0 { psi.min(edge) } else { psi.max(edge) };
            let (v, x) = self.profile_at(param, psi, inner.1);
            let d = 2.0 * (self.lhat - v);
            if d >= q {
                let warm = Cell::new(inner.1);
                let f = |p: f64| {
                    let (v, x) = self.profile_at(param, p, warm.get());
                    let d = 2.0 * (self.lhat - v) - q;
                    if d < 0.0 {
                        warm.set(x);
                    }
                    d
                };
                let root = brent_root(f, inner.0, psi, ROOT_TOL, 100).unwrap_or(psi);
                return (root, false);
            }
            if psi == edge {
                return (edge, true);
            }
            inner = (psi, x);
            step *= 1.6;
        }
    }

    pub fn lr_ci(&self, param: ParamId, level: f64) -> Result<IntervalEstimate> {
        check_level(level)?;
        let q = chi2_quantile(1.0, level);
        let (mut lower, lower_open) = self.endpoint(param, -1.0, q);
        let (mut upper, upper_open) = self.endpoint(param, 1.0, q);
        match param {
            ParamId::Rho => {
                if lower_open {
                    lower = -1.0;
                }
                if upper_open {
                    upper = 1.0;
                }
            }
            ParamId::NTotal => {
                lower = lower.floor().max(self.n() as f64);
                upper = upper.ceil();
            }
            _ => {}
        }
        Ok(IntervalEstimate {
            param_id: param,
            estimate: self.estimate(param),
            lower,
            upper,
            level,
            method: CiMethod::LR,
            lower_open,
            upper_open,
        })
    }

    /// Signed root `sign(ψ̂ - ψ0)·√deviance(ψ0)`.
    pub fn signed_root(&self, param: ParamId, psi0: f64) -> f64 {
        let d = self.deviance(param, psi0);
        (self.estimate(param) - psi0).signum() * d.sqrt()
    }
}

/// LR profile interval for one parameter of a full-likelihood fit.
pub fn lr_profile_ci(data: &MetaDataset, fit: &FitReport, param: ParamId, level: f64) -> Result<IntervalEstimate> {
    Profiler::new(data, fit)?.lr_ci(param, level)
}

/// `R = 2{ℓ(fit) - ℓ(null)}`, to be calibrated against `χ²` with as many
/// degrees of freedom as constrained coordinates.
pub fn lr_test_at(data: &MetaDataset, fit: &FitReport, null_params: &FullParams) -> Result<f64> {
    if fit.likelihood != Likelihood::Full {
        return Err(Error::Domain("the LR test needs a full-likelihood fit".into()));
    }
    let l0 = full_profile_loglik(null_params, data, fit.c_n)?;
    Ok(2.0 * (fit.loglik - l0))
}

/// Inverse probability weighting estimator `Ñ = Σ 1/Φ(γ1 + γ2/s_i)`, with an
/// instability warning when some `Φ_i < 0.01`.
pub fn n_tilde_ipw(studies: &[StudyRecord], g: &SelectionParams) -> Result<(f64, Option<String>)> {
    let phis = selection_probs(g.gamma1, g.gamma2, studies);
    if phis.iter().any(|&p| !(p > 0.0)) {
        return Err(Error::Domain("a selection probability is zero".into()));
    }
    let min = phis.iter().copied().fold(f64::INFINITY, f64::min);
    let warn = (min < 0.01).then(|| format!("IPW estimate unstable: min selection probability {min:.3e} < 0.01"));
    Ok((phis.iter().map(|p| 1.0 / p).sum(), warn))
}

/// Masses used for the plug-in `φ1`, `φ2`.
#[derive(Debug, Clone, PartialEq)]
pub enum PluginWeights<'a> {
    /// Normalized `1/Φ_i`.
    Ipw,
    /// Empirical-likelihood masses `p_i`.
    El(&'a ELWeights),
}

/// Plug-in `σ_c² = φ1 - 1 + Ñ·φ2ᵀ [(-H_c)⁻¹]_{γ12} φ2`, clipped at 0.
///
/// `cov` is the inverse of the negated Hessian of `ℓ_c` at `g`, on the
/// `(γ1, γ2, ρ, τ, θ)` scale.
pub fn sigma_c2_plugin(
    studies: &[StudyRecord],
    g: &SelectionParams,
    cov: &DMatrix<f64>,
    weights: PluginWeights,
) -> Result<(f64, Option<String>)> {
    let (n_tilde, _) = n_tilde_ipw(studies, g)?;
    let a: Vec<f64> = studies.iter().map(|s| g.gamma1 + g.gamma2 / s.se).collect();
    let phis: Vec<f64> = a.iter().map(|&x| std_normal_cdf(x)).collect();
    let q: Vec<f64> = match weights {
        PluginWeights::Ipw => phis.iter().map(|p| 1.0 / (p * n_tilde)).collect(),
        PluginWeights::El(w) => {
            if w.p.len() != studies.len() {
                return Err(Error::Domain("EL weights do not match the data".into()));
            }
            w.p.clone()
        }
    };
    let phi1: f64 = q.iter().zip(&phis).map(|(q, p)| q / p).sum();
    let mut phi2 = [0.0; 2];
    for ((qi, ai), s) in q.iter().zip(&a).zip(studies) {
        let m = inverse_mills(*ai);
        phi2[0] += qi * m;
        phi2[1] += qi * m / s.se;
    }
    let quad =
        phi2[0] * phi2[0] * cov[(0, 0)] + 2.0 * phi2[0] * phi2[1] * cov[(0, 1)] + phi2[1] * phi2[1] * cov[(1, 1)];
    let s2 = phi1 - 1.0 + n_tilde * quad;
    if s2 < 0.0 {
        Ok((0.0, Some(format!("sigma_c^2 plug-in negative ({s2:.3e}), clipped at 0"))))
    } else {
        Ok((s2, None))
    }
}

/// Observed-information summary of a conditional fit.
#[derive(Debug, Clone)]
pub struct ConditionalWald {
    pub gamma: SelectionParams,
    /// Inverse observed information of `ℓ_c` on `(γ1, γ2, ρ, τ, θ)`.
    pub cov: DMatrix<f64>,
    pub n_tilde: f64,
    pub sigma_c2: f64,
    pub n_observed: usize,
    pub warnings: Vec<String>,
}

/// Keeps finite-difference probes for `ρ` inside `(-1, 1)`.
const RHO_HESSIAN_MAX: f64 = 1.0 - 2e-4;

impl ConditionalWald {
    /// When `ρ̃` sits on the edge of its box the maximum is not interior in
    /// `ρ`, so `ρ` is treated as known: the information is inverted on the
    /// other four coordinates and `ρ` gets no standard error.
    pub fn new(data: &MetaDataset, g: &SelectionParams) -> Result<Self> {
        let mut warnings = Vec::new();
        let mut at = *g;
        let rho_fixed = at.rho.abs() > RHO_HESSIAN_MAX;
        if rho_fixed {
            at.rho = at.rho.signum() * RHO_HESSIAN_MAX;
            warnings.push(format!(
                "rho estimate on the boundary; rho held fixed and information evaluated at rho = {:.4}",
                at.rho
            ));
        }
        let h = cond_loglik_hessian(data, &at)?;
        let keep: Vec<usize> = (0..5).filter(|&i| !(rho_fixed && i == idx::RHO)).collect();
        let neg = DMatrix::from_fn(keep.len(), keep.len(), |a, b| -h[(keep[a], keep[b])]);
        let sub = neg.cholesky().ok_or(Error::SingularInformation)?.inverse();
        let mut cov = DMatrix::zeros(5, 5);
        for (a, &i) in keep.iter().enumerate() {
            for (b, &j) in keep.iter().enumerate() {
                cov[(i, j)] = sub[(a, b)];
            }
        }
        if rho_fixed {
            cov[(idx::RHO, idx::RHO)] = f64::NAN;
        }
        let (n_tilde, w1) = n_tilde_ipw(data, g)?;
        let (sigma_c2, w2) = sigma_c2_plugin(data, g, &cov, PluginWeights::Ipw)?;
        warnings.extend(w1);
        warnings.extend(w2);
        Ok(ConditionalWald { gamma: *g, cov, n_tilde, sigma_c2, n_observed: data.n(), warnings })
    }

    pub fn estimate(&self, param: ParamId) -> f64 {
        match param {
            ParamId::NTotal => self.n_tilde,
            ParamId::Alpha => self.n_observed as f64 / self.n_tilde,
            p => self.gamma.to_array()[p.gamma_index().unwrap()],
        }
    }

    pub fn se(&self, param: ParamId) -> f64 {
        match param {
            ParamId::NTotal => (self.n_tilde * self.sigma_c2).sqrt(),
            ParamId::Alpha => self.n_observed as f64 / (self.n_tilde * self.n_tilde) * self.se(ParamId::NTotal),
            p => {
                let i = p.gamma_index().unwrap();
                self.cov[(i, i)].sqrt()
            }
        }
    }

    pub fn ci(&self, param: ParamId, level: f64) -> Result<IntervalEstimate> {
        check_level(level)?;
        let z = std_normal_quantile(0.5 + 0.5 * level);
        let est = self.estimate(param);
        let half = z * self.se(param);
        if !half.is_finite() {
            return Err(Error::Domain(format!("no Wald standard error for {}", param.name())));
        }
        Ok(IntervalEstimate {
            param_id: param,
            estimate: est,
            lower: est - half,
            upper: est + half,
            level,
            method: CiMethod::Wald,
            lower_open: false,
            upper_open: false,
        })
    }

    /// `(ψ̃ - ψ0) / SE(ψ̃)`.
    pub fn statistic(&self, param: ParamId, psi0: f64) -> f64 {
        (self.estimate(param) - psi0) / self.se(param)
    }
}

pub fn wald_ci_conditional(
    data: &MetaDataset,
    g_tilde: &SelectionParams,
    param: ParamId,
    level: f64,
) -> Result<IntervalEstimate> {
    ConditionalWald::new(data, g_tilde)?.ci(param, level)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasDiagnosis {
    pub lr_rho: IntervalEstimate,
    pub wald_rho: Option<IntervalEstimate>,
    pub lr_excludes_zero: bool,
    pub wald_excludes_zero: Option<bool>,
    pub caveat: String,
}

pub fn bias_diagnosis(data: &MetaDataset, fit_cl: &FitReport, fit_fl: &FitReport, level: f64) -> Result<BiasDiagnosis> {
    let lr_rho = lr_profile_ci(data, fit_fl, ParamId::Rho, level)?;
    let wald_rho = wald_ci_conditional(data, &fit_cl.gamma, ParamId::Rho, level).ok();
    Ok(BiasDiagnosis {
        lr_excludes_zero: lr_rho.excludes(0.0),
        wald_excludes_zero: wald_rho.as_ref().map(|w| w.excludes(0.0)),
        lr_rho,
        wald_rho,
        caveat: "publication bias is indicated when the interval for rho excludes 0; \
                 the selection parameters are identified only when rho != 0"
            .into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::{fit_both, FitOptions};
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn draw(seed: u64, n_total: usize, g: [f64; 5]) -> MetaDataset {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let z = Normal::<f64>::new(0.0, 1.0).unwrap();
        let x = Normal::<f64>::new(0.25, 0.5).unwrap();
        let mut out = Vec::new();
        for _ in 0..n_total {
            let s = x.sample(&mut rng).abs();
            let (e, eta, u) = (z.sample(&mut rng), z.sample(&mut rng), z.sample(&mut rng));
            let d = g[2] * e + (1.0 - g[2] * g[2]).sqrt() * eta;
            if g[0] + g[1] / s + d > 0.0 {
                out.push((g[4] + g[3] * u + s * e, s));
            }
        }
        MetaDataset::from_pairs(&out).unwrap()
    }

    fn rec(se: f64) -> StudyRecord {
        StudyRecord { effect: 0.0, se }
    }

    #[test]
    fn n_tilde_examples() {
        // Φ(0) = 0.5 for γ12 = (0, 0)
        let studies: Vec<_> = (0..10).map(|i| rec(0.1 + 0.1 * i as f64)).collect();
        let g = SelectionParams::new(0.0, 0.0, 0.0, 0.0, 0.0).unwrap();
        assert!((n_tilde_ipw(&studies, &g).unwrap().0 - 20.0).abs() < 1e-12);
        let g = SelectionParams::new(40.0, 0.0, 0.0, 0.0, 0.0).unwrap();
        assert!((n_tilde_ipw(&studies, &g).unwrap().0 - 10.0).abs() < 1e-12);
        let g = SelectionParams::new(-3.0, 0.0, 0.0, 0.0, 0.0).unwrap();
        assert!(n_tilde_ipw(&studies, &g).unwrap().1.is_some());
    }

    #[test]
    fn sigma_c2_examples() {
        let studies: Vec<_> = (0..10).map(|i| rec(0.1 + 0.1 * i as f64)).collect();
        let cov = DMatrix::<f64>::identity(5, 5);
        let g = SelectionParams::new(40.0, 0.0, 0.0, 0.0, 0.0).unwrap();
        let (s2, _) = sigma_c2_plugin(&studies, &g, &cov, PluginWeights::Ipw).unwrap();
        assert!(s2.abs() < 1e-12);
        // with zero covariance σ_c² = φ1 - 1 ≥ 0 by Jensen
        let zero = DMatrix::<f64>::zeros(5, 5);
        let g = SelectionParams::new(-0.5, 0.3, 0.0, 0.0, 0.0).unwrap();
        let (s2, _) = sigma_c2_plugin(&studies, &g, &zero, PluginWeights::Ipw).unwrap();
        let phis = selection_probs(-0.5, 0.3, &studies);
        let nt: f64 = phis.iter().map(|p| 1.0 / p).sum();
        let phi1: f64 = phis.iter().map(|p| 1.0 / (p * p * nt)).sum();
        assert!(phi1 >= 1.0 && (s2 - (phi1 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn wald_multiplier_and_symmetry() {
        let data = draw(41, 100, [-0.6, 0.8, 0.6, 0.3, 0.4]);
        let (cl, _) = fit_both(&data, &FitOptions::default()).unwrap();
        let w = ConditionalWald::new(&data, &cl.gamma).unwrap();
        let ci = w.ci(ParamId::Theta, 0.95).unwrap();
        let half = 0.5 * (ci.upper - ci.lower);
        assert!((half / w.se(ParamId::Theta) - 1.959963985).abs() < 1e-8);
        assert!((0.5 * (ci.upper + ci.lower) - cl.gamma.theta).abs() < 1e-12);
        // τ enters through τ², so at τ = 0 the interval is [-c, c]
        let g0 = SelectionParams { tau: 0.0, ..cl.gamma };
        let w0 = ConditionalWald::new(&data, &g0);
        if let Ok(w0) = w0 {
            let t = w0.ci(ParamId::Tau, 0.95).unwrap();
            assert!((t.lower + t.upper).abs() < 1e-12);
        }
    }

    #[test]
    fn lr_interval_properties_and_grid_oracle() {
        let data = draw(43, 100, [-0.6, 0.8, 0.2, 0.5, 0.4]);
        let (_, fl) = fit_both(&data, &FitOptions::default()).unwrap();
        let prof = Profiler::new(&data, &fl).unwrap();
        let q = chi2_quantile(1.0, 0.95);
        for param in [ParamId::Theta, ParamId::NTotal] {
            let ci = prof.lr_ci(param, 0.95).unwrap();
            let est = prof.estimate(param);
            assert!(ci.lower <= est && est <= ci.upper, "{ci:?}");
            assert!(prof.deviance(param, est) < 1e-6);
            if param == ParamId::NTotal {
                assert!(ci.lower >= data.n() as f64);
                continue;
            }
            // deviance at the endpoints equals the threshold
            for e in [ci.lower, ci.upper] {
                let d = prof.deviance(param, e);
                assert!((d - q).abs() < 1e-4, "{param:?} {e}: {d}");
            }
            // 20-point grid scan oracle
            let width = ci.upper - ci.lower;
            let step = 1.5 * width / 20.0;
            let grid: Vec<f64> = (-10..=10).map(|k| est + k as f64 * step).collect();
            let inside: Vec<f64> = grid.iter().copied().filter(|&p| prof.deviance(param, p) < q).collect();
            let (glo, ghi) = (inside[0], *inside.last().unwrap());
            assert!((glo - ci.lower).abs() <= step && (ghi - ci.upper).abs() <= step);
        }
    }

    #[test]
    fn lr_test_at_fit_is_zero() {
        let data = draw(47, 100, [-0.6, 0.8, 0.2, 0.5, 0.4]);
        let (_, fl) = fit_both(&data, &FitOptions::default()).unwrap();
        let r = lr_test_at(&data, &fl, &fl.full_params().unwrap()).unwrap();
        assert!(r.abs() < 1e-8);
        let mut rev = data.studies().to_vec();
        rev.reverse();
        let rev = MetaDataset::new(rev).unwrap();
        let truth =
            FullParams::new(100, 0.8, SelectionParams::new(-0.6, 0.8, 0.2, 0.5, 0.4).unwrap(), data.n()).unwrap();
        let a = lr_test_at(&data, &fl, &truth).unwrap();
        let b = lr_test_at(&rev, &fl, &truth).unwrap();
        assert!(a >= -1e-8 && (a - b).abs() < 1e-9);
    }
}
