//! Conditional and full maximum-likelihood fits.
//!
//! The conditional fit maximizes `ℓ_c` by a grid of `(γ1, γ2)` starts, each
//! profiled over `(ρ, τ, θ)`, followed by joint polishing of the best starts.
//! The full fit maximizes `h2(γ) + max_{N, α} {h1(N, α) + min_λ h3}`; the
//! count block is profiled exactly for each `γ12` (see [`CountProfiler`]).

use std::cell::Cell;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{
    cond_loglik_raw, h1_argmax, h1_cont, h2_raw, h3_min, selection_probs, CountProfile, CountProfiler,
};
use crate::model::{idx, FullParams, MetaDataset, SelectionParams, StudyRecord};
use crate::optimize::{
    bfgs, brent_min, nelder_mead, numerical_gradient, numerical_hessian, BfgsOptions, Bounded, NelderMeadOptions,
};

pub const RHO_MAX: f64 = 1.0 - 1e-6;
pub const GAMMA_BOUND: f64 = 10.0;
pub const ALPHA_MAX: f64 = 1.0 - 1e-6;
/// `N` is capped at this multiple of `n`; the `α` floor is its reciprocal.
pub const N_CAP_FACTOR: u64 = 50;

const GRAD_TOL: f64 = 1e-4;
const RHO_WEAK: f64 = 0.05;
const START_DISAGREEMENT: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMode {
    /// Hold `(γ1, γ2)` at the supplied values and maximize over `(ρ, τ, θ)`.
    FixGamma12,
    /// Maximize over all five components of `γ`.
    FreeGamma12,
}

/// How the full-likelihood maximization over `γ` explores the surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Search {
    /// Quasi-Newton ascent from the start: the maximum in its basin. For
    /// the full likelihood the count block is searched as an outer scalar
    /// problem in `α` so that the inner objective is smooth.
    Local,
    /// Simplex search with restarts: may leave the starting basin.
    Global,
    /// Both of the above from the same start; the higher maximum is kept.
    Best,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Likelihood {
    Conditional,
    Full,
}

pub fn default_gamma12_grid() -> Vec<(f64, f64)> {
    let mut grid = Vec::with_capacity(20);
    for g1 in [-1.5, -1.0, -0.6, -0.2] {
        for g2 in [0.2, 0.4, 0.6, 0.8, 1.0] {
            grid.push((g1, g2));
        }
    }
    grid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub gamma12_grid: Vec<(f64, f64)>,
    /// Objective-evaluation budget per optimizer run.
    pub max_iter: usize,
    /// Objective change at convergence.
    pub tol: f64,
    /// `log*` threshold; `None` uses the number of studies.
    pub c_n: Option<f64>,
    pub mode: FitMode,
    /// Grid starts polished jointly in all five coordinates.
    pub polish_top: usize,
    pub search: Search,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            gamma12_grid: default_gamma12_grid(),
            max_iter: 20_000,
            tol: 1e-8,
            c_n: None,
            mode: FitMode::FreeGamma12,
            polish_top: 3,
            search: Search::Best,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.gamma12_grid.is_empty() {
            return Err(Error::Config("gamma12_grid must be nonempty".into()));
        }
        if self.max_iter < 1 {
            return Err(Error::Config("max_iter must be >= 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config("tol must be > 0".into()));
        }
        if let Some(c) = self.c_n {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config("c_n must be positive and finite".into()));
            }
        }
        Ok(())
    }

    pub fn c_n_for(&self, n: usize) -> f64 {
        self.c_n.unwrap_or(n as f64)
    }

    pub(crate) fn nm(&self) -> NelderMeadOptions {
        NelderMeadOptions { max_evals: self.max_iter, f_tol: 1e-2 * self.tol, ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub likelihood: Likelihood,
    pub gamma: SelectionParams,
    /// `N̂` (full fits only).
    pub n_total: Option<u64>,
    /// `α̂` (full fits only).
    pub alpha: Option<f64>,
    /// Multiplier at `(α̂, γ̂12)` (full fits only).
    pub lambda: Option<f64>,
    /// Maximized objective; for full fits `h3` uses `log*`.
    pub loglik: f64,
    pub converged: bool,
    pub n_evals: usize,
    pub mode: FitMode,
    pub n_observed: usize,
    pub c_n: f64,
    pub warnings: Vec<String>,
}

impl FitReport {
    pub fn full_params(&self) -> Option<FullParams> {
        Some(FullParams { n_total: self.n_total?, alpha: self.alpha?, gamma: self.gamma })
    }
}

/// Box constraints for `(γ1, γ2, ρ, τ, θ)`. `τ` is boxed symmetrically since
/// only `τ²` enters the likelihood; estimates report `|τ|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamBox {
    pub bounds: [Bounded; 5],
}

impl ParamBox {
    pub fn for_data(studies: &[StudyRecord]) -> Self {
        let n = studies.len() as f64;
        let mean = studies.iter().map(|s| s.effect).sum::<f64>() / n;
        let var = studies.iter().map(|s| (s.effect - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        let mean_se = studies.iter().map(|s| s.se).sum::<f64>() / n;
        let tau_hi = 10.0 * var.sqrt().max(1e-3 * mean_se).max(1e-8);
        let lo = studies.iter().map(|s| s.effect).fold(f64::INFINITY, f64::min);
        let hi = studies.iter().map(|s| s.effect).fold(f64::NEG_INFINITY, f64::max);
        ParamBox {
            bounds: [
                Bounded::new(-GAMMA_BOUND, GAMMA_BOUND),
                Bounded::new(-GAMMA_BOUND, GAMMA_BOUND),
                Bounded::new(-RHO_MAX, RHO_MAX),
                Bounded::new(-tau_hi, tau_hi),
                Bounded::new(lo - 5.0, hi + 5.0),
            ],
        }
    }

    pub fn clamp(&self, x: [f64; 5]) -> [f64; 5] {
        let mut y = x;
        for (v, b) in y.iter_mut().zip(&self.bounds) {
            *v = v.clamp(b.lo, b.hi);
        }
        y
    }

    /// Coordinates at (or within `eps` relative width of) a box edge.
    pub fn at_edge(&self, x: &[f64; 5], i: usize, eps: f64) -> bool {
        let b = self.bounds[i];
        let w = eps * (b.hi - b.lo);
        x[i] <= b.lo + w || x[i] >= b.hi - w
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Maximum {
    pub x: [f64; 5],
    pub value: f64,
    pub evals: usize,
    pub converged: bool,
}

/// External-unit simplex step sizes for a dataset.
pub(crate) fn default_steps(studies: &[StudyRecord]) -> [f64; 5] {
    let n = studies.len() as f64;
    let mean = studies.iter().map(|s| s.effect).sum::<f64>() / n;
    let sd = (studies.iter().map(|s| (s.effect - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    [0.3, 0.2, 0.3, 0.5 * sd + 0.05, 0.5 * sd + 0.05]
}

fn internal_step(b: Bounded, x: f64, dx: f64) -> f64 {
    let p = b.to_internal(x);
    let target = if x + dx <= b.hi { x + dx } else { x - dx };
    (b.to_internal(target.clamp(b.lo, b.hi)) - p).abs().clamp(1e-3, 1.0)
}

/// Maximizes `f` over the coordinates flagged in `free`, others held at
/// `start`, by Nelder-Mead on sine-transformed coordinates.
pub(crate) fn maximize_masked<F>(
    f: F,
    start: [f64; 5],
    free: [bool; 5],
    bx: &ParamBox,
    steps: [f64; 5],
    opts: &NelderMeadOptions,
) -> Maximum
where
    F: Fn(&[f64; 5]) -> f64,
{
    let free_idx: Vec<usize> = (0..5).filter(|&i| free[i]).collect();
    let p0: Vec<f64> = free_idx.iter().map(|&i| bx.bounds[i].to_internal(start[i])).collect();
    let st: Vec<f64> = free_idx.iter().map(|&i| internal_step(bx.bounds[i], start[i], steps[i])).collect();
    let assemble = |p: &[f64]| {
        let mut x = start;
        for (k, &i) in free_idx.iter().enumerate() {
            x[i] = bx.bounds[i].to_external(p[k]);
        }
        x
    };
    let m = nelder_mead(|p| -f(&assemble(p)), &p0, &st, opts);
    Maximum { x: assemble(&m.x), value: -m.value, evals: m.evals, converged: m.converged }
}

/// Local quasi-Newton counterpart of [`maximize_masked`].
pub(crate) fn maximize_local_masked<F>(
    f: F,
    start: [f64; 5],
    free: [bool; 5],
    bx: &ParamBox,
    max_iter: usize,
) -> Maximum
where
    F: Fn(&[f64; 5]) -> f64,
{
    let free_idx: Vec<usize> = (0..5).filter(|&i| free[i]).collect();
    let p0: Vec<f64> = free_idx.iter().map(|&i| bx.bounds[i].to_internal(start[i])).collect();
    let assemble = |p: &[f64]| {
        let mut x = start;
        for (k, &i) in free_idx.iter().enumerate() {
            x[i] = bx.bounds[i].to_external(p[k]);
        }
        x
    };
    let opts = BfgsOptions { max_iter, f_tol: LOCAL_F_TOL, ..Default::default() };
    let m = bfgs(|p| -f(&assemble(p)), &p0, &opts);
    Maximum { x: assemble(&m.x), value: -m.value, evals: m.evals, converged: m.converged }
}

/// Norm of the gradient over free coordinates not pinned at a box edge.
pub(crate) fn projected_gradient_norm<F>(f: F, x: &[f64; 5], free: [bool; 5], bx: &ParamBox) -> f64
where
    F: Fn(&[f64; 5]) -> f64,
{
    let free_idx: Vec<usize> = (0..5).filter(|&i| free[i]).collect();
    let sub: Vec<f64> = free_idx.iter().map(|&i| x[i]).collect();
    let g = numerical_gradient(
        |p| {
            let mut y = *x;
            for (k, &i) in free_idx.iter().enumerate() {
                y[i] = p[k];
            }
            f(&y)
        },
        &sub,
    );
    free_idx
        .iter()
        .zip(&g)
        .filter(|(&i, gi)| gi.is_finite() && !bx.at_edge(x, i, 1e-6))
        .map(|(_, gi)| gi * gi)
        .sum::<f64>()
        .sqrt()
}

/// Newton refinement over free interior coordinates, with backtracking.
pub(crate) fn newton_polish<F>(f: F, x: [f64; 5], value: f64, free: [bool; 5], bx: &ParamBox) -> (Maximum, bool)
where
    F: Fn(&[f64; 5]) -> f64,
{
    let free_idx: Vec<usize> = (0..5).filter(|&i| free[i] && !bx.at_edge(&x, i, 1e-4)).collect();
    let mut cur = Maximum { x, value, evals: 0, converged: false };
    if free_idx.is_empty() {
        return (cur, false);
    }
    let embed = |base: &[f64; 5], p: &[f64]| {
        let mut y = *base;
        for (k, &i) in free_idx.iter().enumerate() {
            y[i] = p[k];
        }
        y
    };
    let mut stepped = false;
    for _ in 0..6 {
        let base = cur.x;
        let sub: Vec<f64> = free_idx.iter().map(|&i| base[i]).collect();
        let obj = |p: &[f64]| f(&embed(&base, p));
        let Ok(h) = numerical_hessian(obj, &sub) else { break };
        let g = numerical_gradient(obj, &sub);
        let k = sub.len();
        cur.evals += 2 * k * k + 2 * k + 1;
        let neg_h = -h;
        let Some(chol) = neg_h.clone().cholesky() else { break };
        let delta = chol.solve(&nalgebra::DVector::from_vec(g));
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..12 {
            let trial: Vec<f64> = sub.iter().zip(delta.iter()).map(|(a, d)| a + t * d).collect();
            let y = embed(&base, &trial);
            if free_idx.iter().all(|&i| bx.bounds[i].contains(y[i])) {
                let v = f(&y);
                cur.evals += 1;
                if v.is_finite() && v >= cur.value {
                    improved = v > cur.value || t == 1.0;
                    cur = Maximum { x: y, value: v, ..cur };
                    break;
                }
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
        stepped = true;
        if delta.norm() * t < 1e-10 {
            break;
        }
    }
    (cur, stepped)
}

/// Studies sorted by `(se, effect)`, so that fits do not depend on input order.
pub(crate) fn canonical(data: &MetaDataset) -> Vec<StudyRecord> {
    let mut v = data.studies().to_vec();
    v.sort_by(|a, b| a.se.total_cmp(&b.se).then(a.effect.total_cmp(&b.effect)));
    v
}

/// Inverse-variance mean and moment estimate of `τ` (random-effects start).
pub(crate) fn random_effects_start(studies: &[StudyRecord]) -> (f64, f64) {
    let w: Vec<f64> = studies.iter().map(|s| 1.0 / (s.se * s.se)).collect();
    let sw: f64 = w.iter().sum();
    let mean = studies.iter().zip(&w).map(|(s, w)| w * s.effect).sum::<f64>() / sw;
    let q: f64 = studies.iter().zip(&w).map(|(s, w)| w * (s.effect - mean).powi(2)).sum();
    let denom = sw - w.iter().map(|w| w * w).sum::<f64>() / sw;
    let tau2 = ((q - (studies.len() as f64 - 1.0)) / denom).max(0.0);
    (mean, tau2.sqrt())
}

const FREE_RTT: [bool; 5] = [false, false, true, true, true];
const FREE_ALL: [bool; 5] = [true; 5];

/// Conditional MLE `γ̃ = argmax ℓ_c(γ)`.
pub fn fit_conditional(data: &MetaDataset, opts: &FitOptions) -> Result<FitReport> {
    opts.validate()?;
    data.require(5)?;
    let studies = canonical(data);
    let bx = ParamBox::for_data(&studies);
    let steps = default_steps(&studies);
    let nm = opts.nm();
    let f = |x: &[f64; 5]| cond_loglik_raw(x, &studies);
    let (theta0, tau0) = random_effects_start(&studies);
    let tau0 = tau0.max(0.05 * steps[idx::TAU]);

    let mut evals = 0;
    let mut starts: Vec<((f64, f64), Maximum)> = opts
        .gamma12_grid
        .iter()
        .map(|&(g1, g2)| {
            let x0 = bx.clamp([g1, g2, 0.0, tau0, theta0]);
            let m = maximize_masked(f, x0, FREE_RTT, &bx, steps, &nm);
            ((g1, g2), m)
        })
        .collect();
    evals += starts.iter().map(|(_, m)| m.evals).sum::<usize>();
    sort_starts(&mut starts);

    let polished: Vec<((f64, f64), Maximum)> = starts
        .iter()
        .take(opts.polish_top.max(1))
        .map(|(g, m)| (*g, maximize_masked(f, m.x, FREE_ALL, &bx, steps, &nm)))
        .collect();
    evals += polished.iter().map(|(_, m)| m.evals).sum::<usize>();
    let mut ranked = polished.clone();
    sort_starts(&mut ranked);
    let best_nm = ranked[0].1;

    let mut warnings = Vec::new();
    if ranked.iter().any(|(_, m)| (best_nm.value - m.value).abs() > START_DISAGREEMENT) {
        warnings.push(format!(
            "multiple starts disagree by more than {START_DISAGREEMENT} in the conditional log-likelihood"
        ));
    }

    let (best, _) = newton_polish(f, best_nm.x, best_nm.value, FREE_ALL, &bx);
    evals += best.evals;
    let grad = projected_gradient_norm(f, &best.x, FREE_ALL, &bx);
    let converged =
        best_nm.converged && best.value.is_finite() && grad < GRAD_TOL && !pinned_effect_block(&bx, &best.x);
    if !converged {
        warnings.push(format!("conditional fit not converged (gradient norm {grad:.3e})"));
    }
    let gamma = SelectionParams::from_array(best.x);
    if gamma.rho.abs() < RHO_WEAK {
        warnings.push(format!(
            "|rho| = {:.3e} < {RHO_WEAK}: the selection parameters are only identified when rho != 0",
            gamma.rho.abs()
        ));
    }
    warnings.extend(edge_warnings(&bx, &best.x));

    Ok(FitReport {
        likelihood: Likelihood::Conditional,
        gamma,
        n_total: None,
        alpha: None,
        lambda: None,
        loglik: best.value,
        converged,
        n_evals: evals,
        mode: opts.mode,
        n_observed: studies.len(),
        c_n: opts.c_n_for(studies.len()),
        warnings,
    })
}

const COORD_NAMES: [&str; 5] = ["gamma1", "gamma2", "rho", "tau", "theta"];

fn pinned(bx: &ParamBox, x: &[f64; 5], i: usize) -> bool {
    if i == idx::TAU {
        x[i].abs() >= bx.bounds[i].hi * (1.0 - 1e-6)
    } else {
        bx.at_edge(x, i, 1e-6)
    }
}

pub(crate) fn pinned_off_rho(bx: &ParamBox, x: &[f64; 5]) -> bool {
    (0..5).any(|i| i != idx::RHO && pinned(bx, x, i))
}

/// `τ` or `θ` on the box edge: the box there is wider than any sensible
/// estimate, so such fits are reported as not converged. An edge maximum in
/// `γ1`, `γ2` or `ρ` is a maximum of the boxed problem and only warned about.
pub(crate) fn pinned_effect_block(bx: &ParamBox, x: &[f64; 5]) -> bool {
    [idx::TAU, idx::THETA].into_iter().any(|i| pinned(bx, x, i))
}

pub(crate) fn edge_warnings(bx: &ParamBox, x: &[f64; 5]) -> Vec<String> {
    (0..5)
        .filter(|&i| pinned(bx, x, i))
        .map(|i| format!("{} estimate {:.6} is at the edge of its search box", COORD_NAMES[i], x[i]))
        .collect()
}

/// Conditional MLE by local quasi-Newton ascent from a given `γ` (no grid).
pub fn fit_conditional_from(data: &MetaDataset, start: &SelectionParams, opts: &FitOptions) -> Result<FitReport> {
    opts.validate()?;
    data.require(5)?;
    let studies = canonical(data);
    let bx = ParamBox::for_data(&studies);
    let f = |x: &[f64; 5]| cond_loglik_raw(x, &studies);
    let m = maximize_local_masked(f, bx.clamp(start.to_array()), FREE_ALL, &bx, 500);
    let (best, _) = newton_polish(f, m.x, m.value, FREE_ALL, &bx);
    let mut warnings = Vec::new();
    let grad = projected_gradient_norm(f, &best.x, FREE_ALL, &bx);
    let converged = best.value.is_finite() && grad < GRAD_TOL && !pinned_effect_block(&bx, &best.x);
    if !converged {
        warnings.push(format!("conditional fit not converged (gradient norm {grad:.3e})"));
    }
    let gamma = SelectionParams::from_array(best.x);
    if gamma.rho.abs() < RHO_WEAK {
        warnings.push(format!(
            "|rho| = {:.3e} < {RHO_WEAK}: the selection parameters are only identified when rho != 0",
            gamma.rho.abs()
        ));
    }
    warnings.extend(edge_warnings(&bx, &best.x));
    Ok(FitReport {
        likelihood: Likelihood::Conditional,
        gamma,
        n_total: None,
        alpha: None,
        lambda: None,
        loglik: best.value,
        converged,
        n_evals: m.evals + best.evals,
        mode: opts.mode,
        n_observed: studies.len(),
        c_n: opts.c_n_for(studies.len()),
        warnings,
    })
}

/// Ties are broken by the lexicographically smallest start.
fn sort_starts(v: &mut [((f64, f64), Maximum)]) {
    v.sort_by(|(ga, a), (gb, b)| b.value.total_cmp(&a.value).then(ga.0.total_cmp(&gb.0)).then(ga.1.total_cmp(&gb.1)));
}

const ALPHA_GRID: usize = 16;
/// Relative objective change that ends a local search.
const LOCAL_F_TOL: f64 = 1e-10;
const STEPWISE_ITER: usize = 300;

/// The full profile log EL as a function of `γ`, with `(N, α, λ)` profiled
/// out, together with its restrictions used by the profile intervals.
#[derive(Debug, Clone)]
pub struct FullProblem {
    pub studies: Vec<StudyRecord>,
    pub c_n: f64,
    pub n_max: u64,
    pub alpha_lo: f64,
    pub alpha_hi: f64,
    pub bx: ParamBox,
}

impl FullProblem {
    pub fn new(data: &MetaDataset, c_n: f64) -> Self {
        let studies = canonical(data);
        let n = studies.len();
        FullProblem {
            bx: ParamBox::for_data(&studies),
            n_max: N_CAP_FACTOR * n as u64,
            alpha_lo: 1.0 / N_CAP_FACTOR as f64,
            alpha_hi: ALPHA_MAX,
            c_n,
            studies,
        }
    }

    pub fn n(&self) -> usize {
        self.studies.len()
    }

    fn with_profiler<T>(&self, g1: f64, g2: f64, f: impl FnOnce(&CountProfiler) -> T) -> T {
        let phis = selection_probs(g1, g2, &self.studies);
        let prof = CountProfiler::new(&phis, self.c_n, self.alpha_lo, self.alpha_hi);
        f(&prof)
    }

    pub(crate) fn count(&self, g1: f64, g2: f64) -> CountProfile {
        self.with_profiler(g1, g2, |p| p.best(self.n_max))
    }

    pub fn h2(&self, x: &[f64; 5]) -> f64 {
        h2_raw(x, &self.studies)
    }

    /// `max_N h1(N, α)` over integers in `[n, n_max]`.
    pub(crate) fn h1_tilde(&self, alpha: f64) -> (u64, f64) {
        let n = self.n();
        let m = h1_argmax(alpha, n).map_or(self.n_max, |m| m.min(self.n_max));
        (m, h1_cont(m as f64, alpha, n))
    }

    /// `h2(γ) + min_λ h3(α, γ12, λ)`.
    pub fn h23(&self, x: &[f64; 5], alpha: f64) -> f64 {
        let h2 = self.h2(x);
        if !h2.is_finite() {
            return f64::NEG_INFINITY;
        }
        let phis = selection_probs(x[idx::GAMMA1], x[idx::GAMMA2], &self.studies);
        h2 + h3_min(alpha, &phis, self.c_n).0
    }

    /// Maximizes `h̃1(α) + max_γ h23(γ, α)` over `α`: a logit grid, then
    /// Brent around the best grid point. The inner maximization runs from
    /// `x0` at every `α`.
    /// `α` is confined to the interior of the hull of the `Φ_i` at `x0`,
    /// where the inner start is feasible.
    pub(crate) fn stepwise(&self, x0: [f64; 5], free: [bool; 5]) -> (f64, Maximum) {
        let logit = |a: f64| (a / (1.0 - a)).ln();
        let phis = selection_probs(x0[idx::GAMMA1], x0[idx::GAMMA2], &self.studies);
        let (pmin, pmax) = phis.iter().fold((1.0f64, 0.0f64), |(lo, hi), &p| (lo.min(p), hi.max(p)));
        let pad = 1e-6 * (pmax - pmin);
        let lo = (pmin + pad).clamp(self.alpha_lo, self.alpha_hi);
        let hi = (pmax - pad).clamp(self.alpha_lo, self.alpha_hi);
        let (zlo, zhi) = (logit(lo), logit(hi.max(lo)));
        let evals = Cell::new(0);
        let at = |z: f64| {
            let a = 1.0 / (1.0 + (-z).exp());
            let m = maximize_local_masked(|x| self.h23(x, a), x0, free, &self.bx, STEPWISE_ITER);
            evals.set(evals.get() + m.evals);
            (a, Maximum { value: self.h1_tilde(a).1 + m.value, ..m })
        };
        let zs: Vec<f64> = (0..=ALPHA_GRID).map(|k| zlo + (zhi - zlo) * k as f64 / ALPHA_GRID as f64).collect();
        let scan: Vec<(f64, Maximum)> = zs.iter().map(|&z| at(z)).collect();
        let k = (0..scan.len()).max_by(|&i, &j| scan[i].1.value.total_cmp(&scan[j].1.value)).unwrap();
        let (a, b) = (zs[k.saturating_sub(1)], zs[(k + 1).min(ALPHA_GRID)]);
        let (z, _) = brent_min(|z| -at(z).1.value, a, b, 1e-5, 40);
        let refined = at(z);
        let (alpha, mut best) = if refined.1.value >= scan[k].1.value { refined } else { scan[k] };
        best.evals = evals.get();
        (alpha, best)
    }

    /// `max_{N, α} ℓ(N, α, γ)`.
    pub fn loglik(&self, x: &[f64; 5]) -> f64 {
        let h2 = self.h2(x);
        if !h2.is_finite() {
            return f64::NEG_INFINITY;
        }
        h2 + self.count(x[idx::GAMMA1], x[idx::GAMMA2]).value
    }

    /// `max_α ℓ(N, α, γ)` for real `N`.
    pub fn loglik_fixed_n(&self, x: &[f64; 5], n_total: f64) -> f64 {
        let h2 = self.h2(x);
        if !h2.is_finite() {
            return f64::NEG_INFINITY;
        }
        h2 + self.with_profiler(x[idx::GAMMA1], x[idx::GAMMA2], |p| p.best_alpha_for(n_total).value)
    }

    /// `max_N ℓ(N, α, γ)`.
    pub fn loglik_fixed_alpha(&self, x: &[f64; 5], alpha: f64) -> f64 {
        let h2 = self.h2(x);
        if !h2.is_finite() {
            return f64::NEG_INFINITY;
        }
        h2 + self.with_profiler(x[idx::GAMMA1], x[idx::GAMMA2], |p| p.at_alpha(alpha).value)
    }
}

/// Full MLE `(N̂, α̂, γ̂)`, started from `γ12 = gamma12_init`.
pub fn fit_full(data: &MetaDataset, gamma12_init: (f64, f64), opts: &FitOptions) -> Result<FitReport> {
    opts.validate()?;
    data.require(5)?;
    let prob = FullProblem::new(data, opts.c_n_for(data.n()));
    let steps = default_steps(&prob.studies);
    let (theta0, tau0) = random_effects_start(&prob.studies);
    let x0 = prob.bx.clamp([gamma12_init.0, gamma12_init.1, 0.0, tau0.max(0.05 * steps[idx::TAU]), theta0]);
    // with γ12 held fixed the count block is constant, so only h2 is needed
    let inner = maximize_masked(|x| prob.h2(x), x0, FREE_RTT, &prob.bx, steps, &opts.nm());
    fit_full_from(&prob, inner.x, opts, inner.evals)
}

/// Full MLE started from a complete `γ`, e.g. the conditional estimate.
pub fn fit_full_at(data: &MetaDataset, start: &SelectionParams, opts: &FitOptions) -> Result<FitReport> {
    opts.validate()?;
    data.require(5)?;
    let prob = FullProblem::new(data, opts.c_n_for(data.n()));
    let mut x0 = prob.bx.clamp(start.to_array());
    let mut warnings = Vec::new();
    if opts.mode == FitMode::FreeGamma12 && (!prob.loglik(&x0).is_finite() || pinned_off_rho(&prob.bx, &x0)) {
        // an infeasible or edge-pinned start: move γ12 to the best grid point
        warnings.push("start replaced by the best grid value of (gamma1, gamma2)".to_string());
        let mut best = f64::NEG_INFINITY;
        let base = x0;
        for &(g1, g2) in &opts.gamma12_grid {
            let cand = prob.bx.clamp([g1, g2, base[2], base[3], base[4]]);
            let v = prob.loglik(&cand);
            if v > best {
                best = v;
                x0 = cand;
            }
        }
    }
    let x0 = if opts.mode == FitMode::FixGamma12 {
        maximize_masked(|x| prob.h2(x), x0, FREE_RTT, &prob.bx, default_steps(&prob.studies), &opts.nm()).x
    } else {
        x0
    };
    let mut fit = fit_full_from(&prob, x0, opts, 0)?;
    warnings.append(&mut fit.warnings);
    fit.warnings = warnings;
    Ok(fit)
}

fn fit_full_from(prob: &FullProblem, x0: [f64; 5], opts: &FitOptions, mut evals: usize) -> Result<FitReport> {
    let n = prob.n();
    let steps = default_steps(&prob.studies);
    let mut warnings = Vec::new();

    let best = match opts.mode {
        FitMode::FixGamma12 => {
            let m = maximize_masked(|x| prob.h2(x), x0, FREE_RTT, &prob.bx, steps, &opts.nm());
            let (p, _) = newton_polish(|x| prob.h2(x), m.x, m.value, FREE_RTT, &prob.bx);
            evals += m.evals + p.evals;
            let grad = projected_gradient_norm(|x| prob.h2(x), &p.x, FREE_RTT, &prob.bx);
            Maximum { converged: m.converged && grad < GRAD_TOL, ..p }
        }
        FitMode::FreeGamma12 => {
            let local = || {
                let (alpha, m) = prob.stepwise(x0, FREE_ALL);
                let grad = projected_gradient_norm(|x| prob.h23(x, alpha), &m.x, FREE_ALL, &prob.bx);
                Maximum { converged: m.converged || grad < GRAD_TOL, ..m }
            };
            let global = || maximize_masked(|x| prob.loglik(x), x0, FREE_ALL, &prob.bx, steps, &opts.nm());
            let m = match opts.search {
                Search::Local => local(),
                Search::Global => global(),
                Search::Best => {
                    let (a, b) = (local(), global());
                    let spent = a.evals + b.evals;
                    // compare on the same objective; a non-finite value never wins
                    let (va, vb) = (prob.loglik(&a.x), prob.loglik(&b.x));
                    let m = if vb > va || (!va.is_finite() && vb.is_finite()) { b } else { a };
                    Maximum { evals: spent, ..m }
                }
            };
            evals += m.evals;
            m
        }
    };

    let count = prob.count(best.x[idx::GAMMA1], best.x[idx::GAMMA2]);
    if !count.value.is_finite() {
        return Err(Error::Infeasible { alpha: count.alpha });
    }
    let n_total = count.n_total.round() as u64;
    let loglik = prob.h2(&best.x) + count.value;
    let converged =
        best.converged && loglik.is_finite() && !pinned_effect_block(&prob.bx, &best.x) && n_total < prob.n_max;
    if !converged {
        warnings.push("full-likelihood fit not converged".to_string());
    }
    if count.alpha - prob.alpha_lo < 1e-4 || prob.alpha_hi - count.alpha < 1e-4 {
        warnings.push(format!("alpha estimate {:.6} is within 1e-4 of its search bound", count.alpha));
    }
    if n_total >= prob.n_max {
        warnings.push(format!("N estimate hit the cap {}", prob.n_max));
    }

    let phis = selection_probs(best.x[idx::GAMMA1], best.x[idx::GAMMA2], &prob.studies);
    let plain_h3: f64 = -phis.iter().map(|p| (count.lambda * (p - count.alpha)).ln_1p()).sum::<f64>();
    let star_h3 = crate::likelihood::h3_at(count.alpha, &phis, count.lambda, prob.c_n);
    if !(plain_h3 - star_h3).abs().le(&1e-8) {
        warnings.push(format!(
            "log-likelihood with plain log in h3 differs from the log* value: {:.10e} vs {:.10e}",
            loglik - star_h3 + plain_h3,
            loglik
        ));
    }
    let gamma = SelectionParams::from_array(best.x);
    if gamma.rho.abs() < RHO_WEAK {
        warnings.push(format!(
            "|rho| = {:.3e} < {RHO_WEAK}: the selection parameters are only identified when rho != 0",
            gamma.rho.abs()
        ));
    }
    warnings.extend(edge_warnings(&prob.bx, &best.x));

    Ok(FitReport {
        likelihood: Likelihood::Full,
        gamma,
        n_total: Some(n_total),
        alpha: Some(count.alpha),
        lambda: Some(count.lambda),
        loglik,
        converged,
        n_evals: evals,
        mode: opts.mode,
        n_observed: n,
        c_n: prob.c_n,
        warnings,
    })
}

/// Conditional fit followed by the full fit warm-started at `γ̃`.
pub fn fit_both(data: &MetaDataset, opts: &FitOptions) -> Result<(FitReport, FitReport)> {
    let cl = fit_conditional(data, opts)?;
    let fl = fit_full_at(data, &cl.gamma, opts)?;
    Ok((cl, fl))
}

/// Hessian of `ℓ_c` at `γ` on the external scale.
pub fn cond_loglik_hessian(data: &MetaDataset, g: &SelectionParams) -> Result<DMatrix<f64>> {
    let studies = canonical(data);
    numerical_hessian(
        |p| {
            let x = [p[0], p[1], p[2], p[3], p[4]];
            cond_loglik_raw(&x, &studies)
        },
        &g.to_array(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::{cond_loglik, full_profile_loglik, h1_argmax};
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Normal};

    /// Draws a published sample from the selection model with a plain
    /// rejection loop (independent of the simulate module).
    fn draw(seed: u64, n_total: usize, g: [f64; 5]) -> MetaDataset {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let z = Normal::<f64>::new(0.0, 1.0).unwrap();
        let x = Normal::<f64>::new(0.25, 0.5).unwrap();
        let mut out = Vec::new();
        for _ in 0..n_total {
            let s: f64 = x.sample(&mut rng).abs();
            let (e, eta, u): (f64, f64, f64) = (z.sample(&mut rng), z.sample(&mut rng), z.sample(&mut rng));
            let d = g[2] * e + (1.0 - g[2] * g[2]).sqrt() * eta;
            if g[0] + g[1] / s + d > 0.0 {
                out.push((g[4] + g[3] * u + s * e, s));
            }
        }
        MetaDataset::from_pairs(&out).unwrap()
    }

    #[test]
    fn conditional_fit_rho_zero_matches_random_effects_fit() {
        let data = draw(3, 200, [-0.6, 0.8, 0.0, 0.5, 0.4]);
        let fit = fit_conditional(&data, &FitOptions::default()).unwrap();
        // with ρ = 0 the conditional likelihood is the random-effects one
        // plus a constant, so its (τ, θ) profile at ρ = 0 is the plain RE MLE
        let studies = canonical(&data);
        let re = |t: &[f64]| {
            -studies
                .iter()
                .map(|s| {
                    let v = t[0] * t[0] + s.se * s.se;
                    -0.5 * v.ln() - 0.5 * (s.effect - t[1]).powi(2) / v
                })
                .sum::<f64>()
        };
        let m = nelder_mead(re, &[0.3, 0.0], &[0.1, 0.1], &NelderMeadOptions::default());
        let g_re = SelectionParams::new(fit.gamma.gamma1, fit.gamma.gamma2, 0.0, m.x[0].abs(), m.x[1]).unwrap();
        let at_zero = cond_loglik(&g_re, &data).unwrap();
        assert!(fit.loglik >= at_zero - 1e-9);
        if fit.gamma.rho.abs() < RHO_WEAK {
            assert!(fit.warnings.iter().any(|w| w.contains("identified")));
            assert!((fit.gamma.theta - m.x[1]).abs() < 0.05);
        }
    }

    #[test]
    fn conditional_fit_hessian_is_negative_semidefinite() {
        let mut checked = 0;
        for seed in 20..30 {
            let data = draw(seed, 150, [-0.6, 0.8, 0.6, 0.3, 0.4]);
            let fit = fit_conditional(&data, &FitOptions::default()).unwrap();
            if fit.gamma.rho.abs() > 0.99 {
                assert!(fit.warnings.iter().any(|w| w.contains("rho")));
            }
            if fit.warnings.iter().any(|w| w.contains("edge")) {
                continue;
            }
            assert!(fit.converged, "{:?}", fit.warnings);
            let h = cond_loglik_hessian(&data, &fit.gamma).unwrap();
            let eig = h.symmetric_eigen().eigenvalues;
            assert!(eig.iter().all(|&e| e <= 1e-6), "{eig}");
            checked += 1;
        }
        assert!(checked >= 3);
    }

    #[test]
    fn duplicated_data_keeps_the_argmax() {
        let data = draw(7, 80, [-0.6, 0.8, 0.5, 0.3, 0.2]);
        let doubled = MetaDataset::new(data.iter().chain(data.iter()).copied().collect()).unwrap();
        let a = fit_conditional(&data, &FitOptions::default()).unwrap();
        let b = fit_conditional(&doubled, &FitOptions::default()).unwrap();
        assert!((b.loglik - 2.0 * a.loglik).abs() < 1e-6);
        assert!((a.gamma.theta - b.gamma.theta).abs() < 1e-4);
    }

    #[test]
    fn fits_are_order_invariant_and_deterministic() {
        let data = draw(9, 60, [-0.6, 0.8, 0.5, 0.3, 0.2]);
        let mut rev = data.studies().to_vec();
        rev.reverse();
        let rev = MetaDataset::new(rev).unwrap();
        let opts = FitOptions::default();
        let (c1, f1) = fit_both(&data, &opts).unwrap();
        let (c2, f2) = fit_both(&rev, &opts).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(f1, f2);
        assert_eq!(fit_both(&data, &opts).unwrap().1, f1);
    }

    #[test]
    fn fix_mode_keeps_gamma12_and_matches_conditional() {
        let data = draw(11, 100, [-0.6, 0.8, 0.4, 0.4, 0.3]);
        let opts = FitOptions { mode: FitMode::FixGamma12, ..FitOptions::default() };
        let cl = fit_conditional(&data, &opts).unwrap();
        let fl = fit_full(&data, cl.gamma.gamma12(), &opts).unwrap();
        assert_eq!(fl.gamma.gamma12(), cl.gamma.gamma12());
        // h2 and ℓ_c differ by a constant when γ12 is fixed
        assert!((fl.gamma.theta - cl.gamma.theta).abs() < 1e-4);
        assert!((fl.gamma.rho - cl.gamma.rho).abs() < 1e-3);
    }

    #[test]
    fn full_fit_consistency_and_random_probes() {
        let data = draw(13, 100, [-0.6, 0.8, 0.2, 0.5, 0.4]);
        let n = data.n();
        let (_, fl) = fit_both(&data, &FitOptions::default()).unwrap();
        let fp = fl.full_params().unwrap();
        assert!(fp.n_total as usize >= n);
        assert_eq!(h1_argmax(fp.alpha, n).unwrap(), fp.n_total);
        let at = full_profile_loglik(&fp, &data, fl.c_n).unwrap();
        assert!((at - fl.loglik).abs() < 1e-8, "{at} vs {}", fl.loglik);

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let mut g = fp.gamma.to_array();
            for v in g.iter_mut() {
                *v += rng.gen_range(-0.05..0.05);
            }
            g[idx::RHO] = g[idx::RHO].clamp(-0.99, 0.99);
            let gamma = SelectionParams::from_array(g);
            let alpha = (fp.alpha + rng.gen_range(-0.05..0.05)).clamp(0.02, 0.999);
            let n_total = (fp.n_total as i64 + rng.gen_range(-5..=5)).max(n as i64) as u64;
            let probe = FullParams::new(n_total, alpha, gamma, n).unwrap();
            let v = full_profile_loglik(&probe, &data, fl.c_n).unwrap();
            assert!(v <= fl.loglik + 1e-7, "{v} > {}", fl.loglik);
        }
    }

    #[test]
    fn conditional_fit_is_consistent_at_large_n() {
        let data = draw(17, 2000, [-0.6, 0.8, 0.2, 0.5, 0.4]);
        let fit = fit_conditional(&data, &FitOptions::default()).unwrap();
        let h = cond_loglik_hessian(&data, &fit.gamma).unwrap();
        let cov = (-h).try_inverse().unwrap();
        let se = cov[(idx::THETA, idx::THETA)].sqrt();
        assert!((fit.gamma.theta - 0.4).abs() < 3.0 * se, "{} ± {se}", fit.gamma.theta);
    }

    #[test]
    fn options_validation() {
        assert!(FitOptions { gamma12_grid: vec![], ..FitOptions::default() }.validate().is_err());
        assert!(FitOptions { tol: 0.0, ..FitOptions::default() }.validate().is_err());
        let tiny = MetaDataset::from_pairs(&[(0.1, 0.2), (0.3, 0.4)]).unwrap();
        assert!(matches!(
            fit_conditional(&tiny, &FitOptions::default()),
            Err(Error::TooFewStudies { got: 2, need: 5 })
        ));
    }
}
