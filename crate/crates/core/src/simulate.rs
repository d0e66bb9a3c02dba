//! Data generator for the selection model and the Monte Carlo harness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{fit_conditional, fit_full_at, FitOptions, FitReport};
use crate::inference::{lr_test_at, n_tilde_ipw, ConditionalWald, IntervalEstimate, ParamId, Profiler};
use crate::model::{FullParams, MetaDataset, SelectionParams, StudyRecord};
use crate::special::{compensated_sum, std_normal_cdf};

/// Published samples smaller than this are redrawn.
pub const MIN_PUBLISHED: usize = 5;
const MAX_ATTEMPTS: u64 = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleKind {
    Sd,
    Variance,
}

/// `s* = |X|` with `X` normal of mean `location` and spread `scale`, read as a variance or an SD per `kind`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeLaw {
    pub location: f64,
    pub scale: f64,
    pub kind: ScaleKind,
}

impl Default for SeLaw {
    fn default() -> Self {
        SeLaw { location: 0.25, scale: 0.5, kind: ScaleKind::Variance }
    }
}

impl SeLaw {
    pub fn sd(&self) -> f64 {
        match self.kind {
            ScaleKind::Sd => self.scale,
            ScaleKind::Variance => self.scale.sqrt(),
        }
    }

    /// `E Φ(γ1 + γ2/s*)` by composite Simpson over `X`.
    pub fn publishing_rate(&self, gamma1: f64, gamma2: f64) -> f64 {
        let (mu, sd) = (self.location, self.sd());
        let m = 40_000;
        let (a, b) = (mu - 12.0 * sd, mu + 12.0 * sd);
        let h = (b - a) / m as f64;
        let f = |x: f64| {
            let dens = (-0.5 * ((x - mu) / sd).powi(2)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
            let s = x.abs();
            let phi = if s == 0.0 {
                if gamma2 > 0.0 {
                    1.0
                } else if gamma2 < 0.0 {
                    0.0
                } else {
                    std_normal_cdf(gamma1)
                }
            } else {
                std_normal_cdf(gamma1 + gamma2 / s)
            };
            dens * phi
        };
        let terms = (0..=m).map(|k| {
            let w = if k == 0 || k == m {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            w * f(a + k as f64 * h)
        });
        compensated_sum(terms) * h / 3.0
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub n_total0: u64,
    pub gamma0: SelectionParams,
    pub replicates: usize,
    pub seed: u64,
    pub level: f64,
    pub se_law: SeLaw,
    pub fit: FitOptions,
    /// Parameters that receive intervals in [`mc_study`].
    pub ci_params: Vec<ParamId>,
}

impl SimConfig {
    pub fn new(n_total0: u64, gamma0: SelectionParams, replicates: usize, seed: u64) -> Self {
        SimConfig {
            n_total0,
            gamma0,
            replicates,
            seed,
            level: 0.95,
            se_law: SeLaw::default(),
            fit: FitOptions::default(),
            ci_params: SUMMARY_PARAMS.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be >= 1".into()));
        }
        if (self.n_total0 as usize) < MIN_PUBLISHED {
            return Err(Error::Config(format!("n_total0 must be >= {MIN_PUBLISHED}")));
        }
        self.gamma0.validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(self.level > 0.5 && self.level < 1.0) {
            return Err(Error::Config(format!("level must lie in (0.5, 1), got {}", self.level)));
        }
        if !(self.se_law.scale > 0.0 && self.se_law.location.is_finite()) {
            return Err(Error::Config("se law needs a positive scale".into()));
        }
        self.fit.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// True marginal publication probability `α0`.
    pub fn alpha0(&self) -> f64 {
        self.se_law.publishing_rate(self.gamma0.gamma1, self.gamma0.gamma2)
    }

    fn rng(&self, replicate: u64, attempt: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((replicate << 16) | attempt);
        rng
    }
}

/// One latent study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentStudy {
    pub effect: f64,
    pub se: f64,
    pub z: f64,
}

impl LatentStudy {
    pub fn published(&self) -> bool {
        self.z > 0.0
    }
}

fn draw_latent(rng: &mut ChaCha8Rng, g: &SelectionParams, se_x: &Normal<f64>) -> LatentStudy {
    let s = se_x.sample(rng).abs();
    let (eps, eta, u) = (std_normal(rng), std_normal(rng), std_normal(rng));
    let delta = g.rho * eps + (1.0 - g.rho * g.rho).sqrt() * eta;
    LatentStudy { effect: g.theta + g.tau * u + s * eps, se: s, z: g.gamma1 + g.gamma2 / s + delta }
}

fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub data: MetaDataset,
    pub latent: Vec<LatentStudy>,
    /// Draws discarded because fewer than [`MIN_PUBLISHED`] studies published.
    pub redraws: u64,
}

/// Replicate `replicate` of `cfg`; deterministic in `(cfg.seed, replicate)`.
pub fn gen_dataset(cfg: &SimConfig, replicate: u64) -> Result<Generated> {
    let se_x = Normal::new(cfg.se_law.location, cfg.se_law.sd()).map_err(|e| Error::Config(e.to_string()))?;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = cfg.rng(replicate, attempt);
        let latent: Vec<LatentStudy> = (0..cfg.n_total0).map(|_| draw_latent(&mut rng, &cfg.gamma0, &se_x)).collect();
        let published: Vec<StudyRecord> =
            latent.iter().filter(|l| l.published()).map(|l| StudyRecord { effect: l.effect, se: l.se }).collect();
        if published.len() >= MIN_PUBLISHED {
            return Ok(Generated { data: MetaDataset::new(published)?, latent, redraws: attempt });
        }
    }
    Err(Error::TooFewStudies { got: 0, need: MIN_PUBLISHED })
}

/// Fraction of `draws` latent studies that publish.
pub fn empirical_publishing_rate(cfg: &SimConfig, draws: usize) -> Result<f64> {
    let se_x = Normal::new(cfg.se_law.location, cfg.se_law.sd()).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = cfg.rng(u64::MAX >> 16, 0);
    let k = (0..draws).filter(|_| draw_latent(&mut rng, &cfg.gamma0, &se_x).published()).count();
    Ok(k as f64 / draws as f64)
}

pub const SUMMARY_PARAMS: [ParamId; 4] = [ParamId::Theta, ParamId::Tau, ParamId::Rho, ParamId::NTotal];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    CL,
    FL,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    /// Estimates of θ, τ, ρ, N.
    pub estimate: [f64; 4],
    pub intervals: Vec<IntervalEstimate>,
    /// Interval computation failed (estimates still usable).
    pub interval_error: Option<String>,
}

impl MethodOutcome {
    pub fn interval(&self, p: ParamId) -> Option<&IntervalEstimate> {
        self.intervals.iter().find(|i| i.param_id == p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub replicate: u64,
    pub n_published: usize,
    pub redraws: u64,
    /// `Err` holds the failure reason; such replicates are excluded.
    pub cl: std::result::Result<MethodOutcome, String>,
    pub fl: std::result::Result<MethodOutcome, String>,
}

fn truth_of(cfg: &SimConfig, p: ParamId) -> f64 {
    match p {
        ParamId::Theta => cfg.gamma0.theta,
        ParamId::Tau => cfg.gamma0.tau.abs(),
        ParamId::Rho => cfg.gamma0.rho,
        ParamId::NTotal => cfg.n_total0 as f64,
        ParamId::Alpha => cfg.alpha0(),
    }
}

fn slot(p: ParamId) -> usize {
    SUMMARY_PARAMS.iter().position(|&q| q == p).expect("summary parameter")
}

fn cl_outcome(cfg: &SimConfig, data: &MetaDataset, f: &FitReport) -> Result<MethodOutcome> {
    if !f.converged {
        return Err(Error::NotConverged(format!("CL: {}", f.warnings.join("; "))));
    }
    let g = f.gamma;
    let (n_tilde, _) = n_tilde_ipw(data, &g)?;
    let mut out = MethodOutcome { estimate: [g.theta, g.tau, g.rho, n_tilde], intervals: vec![], interval_error: None };
    match ConditionalWald::new(data, &g) {
        Ok(w) => {
            for &p in &cfg.ci_params {
                match w.ci(p, cfg.level) {
                    Ok(ci) => out.intervals.push(ci),
                    Err(e) => out.interval_error = Some(e.to_string()),
                }
            }
        }
        Err(e) => out.interval_error = Some(e.to_string()),
    }
    Ok(out)
}

fn fl_outcome(cfg: &SimConfig, data: &MetaDataset, f: &FitReport) -> Result<MethodOutcome> {
    if !f.converged {
        return Err(Error::NotConverged(format!("FL: {}", f.warnings.join("; "))));
    }
    let g = f.gamma;
    let n_total = f.n_total.ok_or_else(|| Error::Domain("no N estimate".into()))? as f64;
    let mut out = MethodOutcome { estimate: [g.theta, g.tau, g.rho, n_total], intervals: vec![], interval_error: None };
    let prof = Profiler::new(data, f)?;
    for &p in &cfg.ci_params {
        match prof.lr_ci(p, cfg.level) {
            Ok(ci) => out.intervals.push(ci),
            Err(e) => out.interval_error = Some(e.to_string()),
        }
    }
    Ok(out)
}

/// Fits CL and FL to one replicate and computes the intervals: Wald for CL,
/// profile LR for FL. The FL fit starts from the CL estimate.
pub fn run_replicate(cfg: &SimConfig, replicate: u64) -> Result<ReplicateOutcome> {
    let gen = gen_dataset(cfg, replicate)?;
    let data = &gen.data;
    let cl_fit = fit_conditional(data, &cfg.fit);
    let fl_fit = cl_fit.as_ref().map_err(Clone::clone).and_then(|f| fit_full_at(data, &f.gamma, &cfg.fit));
    let cl = cl_fit.and_then(|f| cl_outcome(cfg, data, &f)).map_err(|e| e.to_string());
    let fl = fl_fit.and_then(|f| fl_outcome(cfg, data, &f)).map_err(|e| e.to_string());
    Ok(ReplicateOutcome { replicate, n_published: data.n(), redraws: gen.redraws, cl, fl })
}

pub fn mc_replicates(cfg: &SimConfig) -> Result<Vec<ReplicateOutcome>> {
    cfg.validate()?;
    (0..cfg.replicates as u64).into_par_iter().map(|r| run_replicate(cfg, r)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub param: ParamId,
    pub bias: f64,
    /// Absent with fewer than two usable replicates.
    pub sd: Option<f64>,
    pub rmse: f64,
    pub cp: Option<f64>,
    /// Replicates contributing to bias/sd.
    pub n_estimates: usize,
    /// Replicates contributing to cp.
    pub n_intervals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub rows: Vec<SummaryRow>,
    pub replicates: usize,
    pub failed_cl: usize,
    pub failed_fl: usize,
    pub interval_failed_cl: usize,
    pub interval_failed_fl: usize,
    pub redraws: u64,
}

impl SimSummary {
    pub fn row(&self, method: Method, param: ParamId) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.method == method && r.param == param)
    }
}

/// Bias, SD (divisor `R - 1`) and `RMSE = √(bias² + sd²)`.
pub fn moments(errors: &[f64]) -> (f64, Option<f64>, f64) {
    let r = errors.len() as f64;
    let bias = compensated_sum(errors.iter().copied()) / r;
    let sd =
        (errors.len() >= 2).then(|| (compensated_sum(errors.iter().map(|e| (e - bias).powi(2))) / (r - 1.0)).sqrt());
    let rmse = (bias * bias + sd.unwrap_or(0.0).powi(2)).sqrt();
    (bias, sd, rmse)
}

pub fn summarize(cfg: &SimConfig, outcomes: &[ReplicateOutcome]) -> SimSummary {
    let mut rows = Vec::new();
    for method in [Method::CL, Method::FL] {
        let ok: Vec<&MethodOutcome> = outcomes
            .iter()
            .filter_map(|o| match method {
                Method::CL => o.cl.as_ref().ok(),
                Method::FL => o.fl.as_ref().ok(),
            })
            .collect();
        for p in SUMMARY_PARAMS {
            let truth = truth_of(cfg, p);
            let errors: Vec<f64> = ok.iter().map(|m| m.estimate[slot(p)] - truth).collect();
            let (bias, sd, rmse) = if errors.is_empty() { (f64::NAN, None, f64::NAN) } else { moments(&errors) };
            let hits: Vec<bool> = ok.iter().filter_map(|m| m.interval(p)).map(|ci| ci.contains(truth)).collect();
            let cp = (!hits.is_empty()).then(|| hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64);
            rows.push(SummaryRow {
                method,
                param: p,
                bias,
                sd,
                rmse,
                cp,
                n_estimates: errors.len(),
                n_intervals: hits.len(),
            });
        }
    }
    SimSummary {
        rows,
        replicates: outcomes.len(),
        failed_cl: outcomes.iter().filter(|o| o.cl.is_err()).count(),
        failed_fl: outcomes.iter().filter(|o| o.fl.is_err()).count(),
        interval_failed_cl: outcomes.iter().filter(|o| matches!(&o.cl, Ok(m) if m.interval_error.is_some())).count(),
        interval_failed_fl: outcomes.iter().filter(|o| matches!(&o.fl, Ok(m) if m.interval_error.is_some())).count(),
        redraws: outcomes.iter().map(|o| o.redraws).sum(),
    }
}

pub fn mc_study(cfg: &SimConfig) -> Result<SimSummary> {
    Ok(summarize(cfg, &mc_replicates(cfg)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Hypothesis {
    H01,
    H02,
    H03,
    H04,
}

impl Hypothesis {
    pub const ALL: [Hypothesis; 4] = [Hypothesis::H01, Hypothesis::H02, Hypothesis::H03, Hypothesis::H04];

    pub fn param(self) -> ParamId {
        SUMMARY_PARAMS[self as usize]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QqRow {
    pub replicate: u64,
    pub hypothesis: Hypothesis,
    pub lr_signroot: Option<f64>,
    pub wald_stat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QqTable {
    pub rows: Vec<QqRow>,
    /// `R = 2{ℓ(fit) - ℓ(truth)}` per replicate with a converged FL fit.
    pub lr_truth: Vec<(u64, f64)>,
    pub failed_cl: usize,
    pub failed_fl: usize,
}

impl QqTable {
    pub fn lr(&self, h: Hypothesis) -> Vec<f64> {
        self.rows.iter().filter(|r| r.hypothesis == h).filter_map(|r| r.lr_signroot).collect()
    }

    pub fn wald(&self, h: Hypothesis) -> Vec<f64> {
        self.rows.iter().filter(|r| r.hypothesis == h).filter_map(|r| r.wald_stat).collect()
    }
}

struct QqReplicate {
    rows: Vec<QqRow>,
    lr_truth: Option<f64>,
    cl_ok: bool,
}

fn qq_replicate(cfg: &SimConfig, alpha0: f64, replicate: u64) -> Result<QqReplicate> {
    let gen = gen_dataset(cfg, replicate)?;
    let data = &gen.data;
    let cl = fit_conditional(data, &cfg.fit)?;
    let wald = if cl.converged { ConditionalWald::new(data, &cl.gamma).ok() } else { None };
    let fl = fit_full_at(data, &cl.gamma, &cfg.fit)?;
    let prof = if fl.converged { Some(Profiler::new(data, &fl)?) } else { None };
    let rows = Hypothesis::ALL
        .iter()
        .map(|&h| {
            let p = h.param();
            let psi0 = truth_of(cfg, p);
            QqRow {
                replicate,
                hypothesis: h,
                lr_signroot: prof.as_ref().map(|pr| pr.signed_root(p, psi0)),
                wald_stat: wald.as_ref().map(|w| w.statistic(p, psi0)).filter(|v| v.is_finite()),
            }
        })
        .collect();
    let lr_truth = match prof {
        Some(_) => {
            let truth = FullParams::new(cfg.n_total0, alpha0, cfg.gamma0, data.n())?;
            Some(lr_test_at(data, &fl, &truth)?)
        }
        None => None,
    };
    Ok(QqReplicate { rows, lr_truth, cl_ok: wald.is_some() })
}

/// Sign-root LR and Wald statistics at the truth for θ, τ, ρ and N.
pub fn qq_stats(cfg: &SimConfig) -> Result<QqTable> {
    cfg.validate()?;
    let alpha0 = cfg.alpha0();
    let reps: Vec<QqReplicate> = (0..cfg.replicates as u64)
        .into_par_iter()
        .map(|r| qq_replicate(cfg, alpha0, r).unwrap_or(QqReplicate { rows: vec![], lr_truth: None, cl_ok: false }))
        .collect();
    Ok(QqTable {
        failed_cl: reps.iter().filter(|r| !r.cl_ok).count(),
        failed_fl: reps.iter().filter(|r| r.lr_truth.is_none()).count(),
        lr_truth: reps.iter().zip(0u64..).filter_map(|(r, i)| r.lr_truth.map(|v| (i, v))).collect(),
        rows: reps.into_iter().flat_map(|r| r.rows).collect(),
    })
}
