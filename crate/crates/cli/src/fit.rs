//! `fit`: both likelihoods, intervals, diagnostics and self-checks for one dataset.

use elmeta::distfit::{default_t_grid, f_hat, f_tilde, g_hat, g_tilde_cdf, StepCDF};
use elmeta::estimation::{fit_conditional, fit_full, fit_full_at, FitMode, FitOptions, FitReport};
use elmeta::inference::{
    bias_diagnosis, BiasDiagnosis, CiMethod, ConditionalWald, IntervalEstimate, ParamId, Profiler,
};
use elmeta::likelihood::{cond_loglik, el_weights_phi, full_profile_terms, selection_probs, LoglikTerms};
use elmeta::model::{f1_select_given_study, f3_select_given_se};
use elmeta::special::chi2_quantile;
use elmeta::{MetaDataset, SelectionParams};
use serde::Serialize;

use crate::output::{Cell, Table};
use crate::CliError;

const SUM_TOL: f64 = 1e-10;
const MOMENT_TOL: f64 = 1e-8;
const ENDPOINT_TOL: f64 = 1e-4;
const REDUCTION_TOL: f64 = 1e-12;
const DECOMPOSITION_TOL: f64 = 1e-8;
const MIN_STUDIES: usize = 5;

/// Rows of the report, in order.
pub const REPORT_ROWS: [&str; 6] = ["theta", "exp_theta", "tau", "rho", "N", "alpha"];

#[derive(Debug, Clone, PartialEq)]
pub struct FitArgs {
    pub level: f64,
    pub opts: FitOptions,
}

impl Default for FitArgs {
    fn default() -> Self {
        FitArgs { level: 0.95, opts: FitOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Interval {
    pub estimate: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub method: Option<CiMethod>,
    pub lower_open: bool,
    pub upper_open: bool,
}

impl Interval {
    fn point(estimate: f64) -> Self {
        Interval { estimate, lower: None, upper: None, method: None, lower_open: false, upper_open: false }
    }

    fn from_ci(ci: &IntervalEstimate) -> Self {
        Interval {
            estimate: ci.estimate,
            lower: Some(ci.lower),
            upper: Some(ci.upper),
            method: Some(ci.method),
            lower_open: ci.lower_open,
            upper_open: ci.upper_open,
        }
    }

    fn exp(&self) -> Self {
        Interval {
            estimate: self.estimate.exp(),
            lower: self.lower.map(f64::exp),
            upper: self.upper.map(f64::exp),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub param: String,
    pub cl: Option<Interval>,
    pub fl: Option<Interval>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodDiagnostics {
    pub converged: bool,
    /// Objective at the estimate; for the full likelihood `h3` uses `log*`.
    pub loglik: f64,
    pub n_evals: usize,
    pub gamma: SelectionParams,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FullDiagnostics {
    pub n_total: Option<u64>,
    pub alpha: Option<f64>,
    pub terms: Option<LoglikTerms>,
    /// Full log-likelihood with plain `log` in `h3`; absent where undefined.
    pub loglik_plain_log: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitOutput {
    pub n_studies: usize,
    pub level: f64,
    pub mode: FitMode,
    pub c_n: f64,
    pub rows: Vec<ReportRow>,
    pub conditional: Option<MethodDiagnostics>,
    pub full: Option<MethodDiagnostics>,
    pub full_details: Option<FullDiagnostics>,
    pub bias_diagnosis: Option<BiasDiagnosis>,
    pub checks: Vec<Check>,
    /// Non-fatal problems, e.g. an interval that does not exist at a boundary estimate.
    pub warnings: Vec<String>,
    /// Failures; the report is partial and the exit status nonzero.
    pub errors: Vec<String>,
}

impl FitOutput {
    pub fn all_checks_pass(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn row(&self, name: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.param == name)
    }

    /// Nonzero-exit cause, if any: a failed fit, a non-converged fit or a failed check.
    pub fn failure(&self) -> Option<CliError> {
        let mut why: Vec<String> = self.errors.clone();
        for (name, d) in [("conditional", &self.conditional), ("full", &self.full)] {
            if let Some(d) = d {
                if !d.converged {
                    why.push(format!("{name} fit did not converge"));
                }
            }
        }
        why.extend(self.checks.iter().filter(|c| !c.passed).map(|c| format!("check {} failed: {}", c.name, c.detail)));
        (!why.is_empty()).then(|| CliError::Numerical(why.join("; ")))
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(&[
            "param",
            "cl_estimate",
            "cl_lower",
            "cl_upper",
            "cl_method",
            "fl_estimate",
            "fl_lower",
            "fl_upper",
            "fl_method",
        ]);
        let cells = |i: &Option<Interval>| -> Vec<Cell> {
            match i {
                Some(i) => vec![
                    i.estimate.into(),
                    i.lower.into(),
                    i.upper.into(),
                    i.method.map_or(Cell::Empty, |m| Cell::Text(method_name(m).into())),
                ],
                None => vec![Cell::Empty, Cell::Empty, Cell::Empty, Cell::Empty],
            }
        };
        for r in &self.rows {
            let mut row = vec![Cell::Text(r.param.clone())];
            row.extend(cells(&r.cl));
            row.extend(cells(&r.fl));
            t.push(row);
        }
        t
    }
}

fn method_name(m: CiMethod) -> &'static str {
    match m {
        CiMethod::LR => "LR",
        CiMethod::Wald => "Wald",
    }
}

fn diagnostics(f: &FitReport) -> MethodDiagnostics {
    MethodDiagnostics {
        converged: f.converged,
        loglik: f.loglik,
        n_evals: f.n_evals,
        gamma: f.gamma,
        warnings: f.warnings.clone(),
    }
}

const PARAMS: [ParamId; 5] = [ParamId::Theta, ParamId::Tau, ParamId::Rho, ParamId::NTotal, ParamId::Alpha];

/// Rows in [`REPORT_ROWS`] order from per-parameter intervals in `PARAMS` order.
fn expand(per_param: &[Option<Interval>; 5]) -> [Option<Interval>; 6] {
    let [th, ta, rh, n, al] = per_param.clone();
    let e = th.as_ref().map(Interval::exp);
    [th, e, ta, rh, n, al]
}

fn cl_intervals(
    data: &MetaDataset,
    f: &FitReport,
    level: f64,
    errors: &mut Vec<String>,
    warnings: &mut Vec<String>,
) -> [Option<Interval>; 5] {
    let g = f.gamma;
    let points = [Some(g.theta), Some(g.tau.abs()), Some(g.rho), None, None];
    match ConditionalWald::new(data, &g) {
        Ok(w) => {
            warnings.extend(w.warnings.iter().cloned());
            PARAMS.map(|p| match w.ci(p, level) {
                Ok(ci) => Some(Interval::from_ci(&ci)),
                Err(e) => {
                    warnings.push(format!("conditional {} interval: {e}", p.name()));
                    Some(Interval::point(w.estimate(p)))
                }
            })
        }
        Err(e) => {
            errors.push(format!("conditional Wald intervals: {e}"));
            let n_tilde = elmeta::inference::n_tilde_ipw(data, &g).ok().map(|(n, _)| n);
            let mut out = points.map(|p| p.map(Interval::point));
            out[3] = n_tilde.map(Interval::point);
            out[4] = n_tilde.map(|n| Interval::point(data.n() as f64 / n));
            out
        }
    }
}

fn fl_intervals(
    prof: Option<&Profiler>,
    f: &FitReport,
    level: f64,
    errors: &mut Vec<String>,
) -> ([Option<Interval>; 5], Vec<IntervalEstimate>) {
    let g = f.gamma;
    let points = [Some(g.theta), Some(g.tau.abs()), Some(g.rho), f.n_total.map(|n| n as f64), f.alpha];
    let Some(prof) = prof else {
        return (points.map(|p| p.map(Interval::point)), vec![]);
    };
    let mut cis = Vec::new();
    let out = PARAMS.map(|p| match prof.lr_ci(p, level) {
        Ok(ci) => {
            let i = Interval::from_ci(&ci);
            cis.push(ci);
            Some(i)
        }
        Err(e) => {
            errors.push(format!("full {} interval: {e}", p.name()));
            Some(Interval::point(prof.estimate(p)))
        }
    });
    (out, cis)
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check { name: name.into(), passed, detail }
}

fn monotone_unit(v: &[f64]) -> bool {
    v.iter().all(|x| (0.0..=1.0).contains(x)) && v.windows(2).all(|w| w[0] <= w[1])
}

fn step_values(f: &StepCDF) -> Vec<f64> {
    f.support.iter().map(|&x| f.eval(x)).collect()
}

fn el_check(data: &MetaDataset, f: &FitReport) -> Check {
    let name = "el_constraints";
    let Some(alpha) = f.alpha else {
        return check(name, false, "no alpha estimate".into());
    };
    let phis = selection_probs(f.gamma.gamma1, f.gamma.gamma2, data);
    match el_weights_phi(alpha, &phis, f.c_n) {
        Ok(w) => {
            let sum: f64 = w.p.iter().sum();
            let moment: f64 = w.p.iter().zip(&phis).map(|(p, phi)| p * phi).sum::<f64>() - alpha;
            let positive = w.p.iter().all(|&p| p > 0.0);
            let ok = positive && (sum - 1.0).abs() <= SUM_TOL && moment.abs() <= MOMENT_TOL;
            check(
                name,
                ok,
                format!(
                    "min p {:e}, |sum p - 1| {:e}, |sum p Phi - alpha| {:e}",
                    w.p.iter().cloned().fold(f64::INFINITY, f64::min),
                    (sum - 1.0).abs(),
                    moment.abs()
                ),
            )
        }
        Err(e) => check(name, false, e.to_string()),
    }
}

fn cdf_check(data: &MetaDataset, cl: Option<&FitReport>, fl: Option<&FitReport>) -> Check {
    let mut bad = Vec::new();
    let mut count = 0;
    if let Some(f) = fl {
        let grid = default_t_grid(data, &f.gamma);
        match (f_hat(data, f), g_hat(data, f, &grid)) {
            (Ok(fh), Ok(gh)) => {
                count += 2;
                if !monotone_unit(&step_values(&fh)) {
                    bad.push("F_hat");
                }
                if !monotone_unit(&gh) {
                    bad.push("G_hat");
                }
            }
            _ => bad.push("F_hat/G_hat unavailable"),
        }
    }
    if let Some(f) = cl {
        let grid = default_t_grid(data, &f.gamma);
        match (f_tilde(data, &f.gamma), g_tilde_cdf(data, &f.gamma, &grid)) {
            (Ok((ft, _)), Ok(gt)) => {
                count += 2;
                if !monotone_unit(&step_values(&ft)) {
                    bad.push("F_tilde");
                }
                if !monotone_unit(&gt) {
                    bad.push("G_tilde");
                }
            }
            _ => bad.push("F_tilde/G_tilde unavailable"),
        }
    }
    let detail = if bad.is_empty() { format!("{count} estimates monotone in [0, 1]") } else { bad.join(", ") };
    check("cdf_monotone", bad.is_empty() && count > 0, detail)
}

/// At `ρ = 0` selection given the study equals selection given its se, and
/// the conditional log-likelihood is the random-effects log-likelihood.
fn reduction_check(data: &MetaDataset, g: &SelectionParams) -> Check {
    let g0 = SelectionParams { rho: 0.0, ..*g };
    let mut worst = 0.0f64;
    for s in data.iter() {
        match (f1_select_given_study(&g0, s), f3_select_given_se(&g0, s)) {
            (Ok(a), Ok(b)) => worst = worst.max((a - b).abs()),
            _ => return check("rho_zero_reduction", false, "selection probability undefined".into()),
        }
    }
    let Ok(cl) = cond_loglik(&g0, data) else {
        return check("rho_zero_reduction", false, "conditional log-likelihood undefined".into());
    };
    let re: f64 = data
        .iter()
        .map(|s| {
            let var = g0.tau * g0.tau + s.se * s.se;
            -0.5 * var.ln() - (s.effect - g0.theta).powi(2) / (2.0 * var)
        })
        .sum();
    let diff = (cl - re).abs();
    let ok = worst <= REDUCTION_TOL && diff <= REDUCTION_TOL * re.abs().max(1.0);
    check("rho_zero_reduction", ok, format!("max |f1 - f3| {worst:e}, |l_c - l_re| {diff:e}"))
}

fn plain_log_loglik(data: &MetaDataset, f: &FitReport, t: &LoglikTerms) -> Option<f64> {
    let alpha = f.alpha?;
    let phis = selection_probs(f.gamma.gamma1, f.gamma.gamma2, data);
    let mut h3 = 0.0;
    for phi in phis {
        let z = 1.0 + t.lambda * (phi - alpha);
        if !(z > 0.0) {
            return None;
        }
        h3 -= z.ln();
    }
    Some(t.h1 + t.h2 + h3)
}

/// Runs both fits and everything derived from them. Failures are collected
/// in `errors` so that whatever was computed is still reported.
pub fn run_fit(data: &MetaDataset, args: &FitArgs) -> Result<FitOutput, CliError> {
    if data.n() < MIN_STUDIES {
        return Err(elmeta::Error::TooFewStudies { got: data.n(), need: MIN_STUDIES }.into());
    }
    args.opts.validate()?;
    if !(args.level > 0.5 && args.level < 1.0) {
        return Err(CliError::Usage(format!("level must lie in (0.5, 1), got {}", args.level)));
    }
    let level = args.level;
    let opts = &args.opts;
    let mut errors = Vec::new();
    let mut warnings = Vec::new();

    let cl = fit_conditional(data, opts).map_err(|e| errors.push(format!("conditional fit: {e}"))).ok();
    let fl = match &cl {
        Some(c) => fit_full_at(data, &c.gamma, opts),
        None => fit_full(data, opts.gamma12_grid[0], opts),
    }
    .map_err(|e| errors.push(format!("full fit: {e}")))
    .ok();

    let cl_rows = match &cl {
        Some(f) => cl_intervals(data, f, level, &mut errors, &mut warnings),
        None => Default::default(),
    };
    let prof = match &fl {
        Some(f) if f.converged => Profiler::new(data, f).map_err(|e| errors.push(format!("profile: {e}"))).ok(),
        _ => None,
    };
    let (fl_rows, fl_cis) = match &fl {
        Some(f) => fl_intervals(prof.as_ref(), f, level, &mut errors),
        None => Default::default(),
    };
    let rows = REPORT_ROWS
        .iter()
        .zip(expand(&cl_rows).into_iter().zip(expand(&fl_rows)))
        .map(|(name, (cl, fl))| ReportRow { param: name.to_string(), cl, fl })
        .collect();

    let bias = match (&cl, &fl, &prof) {
        (Some(c), Some(f), Some(_)) => {
            bias_diagnosis(data, c, f, level).map_err(|e| errors.push(format!("bias diagnosis: {e}"))).ok()
        }
        _ => None,
    };

    let mut checks = Vec::new();
    let mut full_details = None;
    if let Some(f) = &fl {
        checks.push(el_check(data, f));
        let terms = f.full_params().and_then(|fp| full_profile_terms(&fp, data, f.c_n).ok());
        if let Some(t) = &terms {
            let diff = (t.total() - f.loglik).abs();
            checks.push(check(
                "loglik_decomposition",
                diff <= DECOMPOSITION_TOL,
                format!("|h1 + h2 + h3 - loglik| {diff:e}"),
            ));
        }
        full_details = Some(FullDiagnostics {
            n_total: f.n_total,
            alpha: f.alpha,
            loglik_plain_log: terms.as_ref().and_then(|t| plain_log_loglik(data, f, t)),
            terms,
        });
        checks.push(reduction_check(data, &f.gamma));
    }
    checks.push(cdf_check(data, cl.as_ref(), fl.as_ref()));
    if let Some(p) = &prof {
        let inside = fl_cis.iter().all(|c| c.contains(c.estimate));
        checks.push(check("lr_contains_estimate", inside, format!("{} intervals", fl_cis.len())));
        if let Some(ci) = fl_cis.iter().find(|c| c.param_id == ParamId::NTotal) {
            let ok = ci.lower >= data.n() as f64;
            checks.push(check("n_lower_at_least_n", ok, format!("lower {} vs n {}", ci.lower, data.n())));
        }
        let q = chi2_quantile(1.0, level);
        let mut worst = 0.0f64;
        for ci in fl_cis.iter().filter(|c| matches!(c.param_id, ParamId::Theta | ParamId::Tau | ParamId::Rho)) {
            for (end, open) in [(ci.lower, ci.lower_open), (ci.upper, ci.upper_open)] {
                if !open {
                    worst = worst.max((p.deviance(ci.param_id, end) - q).abs());
                }
            }
        }
        checks.push(check(
            "endpoint_deviance",
            worst <= ENDPOINT_TOL,
            format!("max |deviance - chi2 quantile| {worst:e}"),
        ));
    }

    Ok(FitOutput {
        n_studies: data.n(),
        level,
        mode: opts.mode,
        c_n: opts.c_n_for(data.n()),
        rows,
        conditional: cl.as_ref().map(diagnostics),
        full: fl.as_ref().map(diagnostics),
        full_details,
        bias_diagnosis: bias,
        checks,
        warnings,
        errors,
    })
}
