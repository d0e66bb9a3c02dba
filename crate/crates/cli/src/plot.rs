//! `plotdata`: tables behind the funnel plot, the CDF display and the QQ plots.

use elmeta::distfit::{f_hat, f_tilde, g_hat, g_tilde_cdf, StepCDF};
use elmeta::estimation::{fit_conditional, fit_full_at, FitOptions};
use elmeta::simulate::{qq_stats, Hypothesis, QqTable, SimConfig};
use elmeta::special::{chi2_quantile, std_normal_quantile};
use elmeta::MetaDataset;

use crate::output::{Cell, Table};
use crate::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Kind {
    Funnel,
    Cdf,
    Qq,
}

/// Half-width of the effect grid in units of `max(τ, max s)`, wide enough
/// that every CDF reaches 1 to double precision at the last point.
const G_GRID_HALF: f64 = 9.0;
const G_GRID_POINTS: usize = 201;

pub fn funnel(data: &MetaDataset) -> Table {
    let mut t = Table::new(&["effect", "se", "precision"]);
    for s in data.iter() {
        t.push(vec![s.effect.into(), s.se.into(), (1.0 / s.se).into()]);
    }
    t
}

/// Empirical, full-likelihood and conditional CDFs of the standard errors
/// (`family = F`, over the distinct se values) and of the effects
/// (`family = G`, over an equally spaced grid).
pub fn cdf(data: &MetaDataset, opts: &FitOptions) -> CliResult<Table> {
    let cl = fit_conditional(data, opts)?;
    let fl = fit_full_at(data, &cl.gamma, opts)?;
    if !(cl.converged && fl.converged) {
        return Err(CliError::Numerical("fit did not converge; CDF estimates withheld".into()));
    }
    let ses: Vec<f64> = data.ses().collect();
    let effects: Vec<f64> = data.effects().collect();
    let emp_f = StepCDF::empirical(&ses)?;
    let emp_g = StepCDF::empirical(&effects)?;
    let fh = f_hat(data, &fl)?;
    let (ft, _) = f_tilde(data, &cl.gamma)?;

    let mut t = Table::new(&["family", "x", "empirical", "fl", "cl"]);
    for &x in &emp_f.support {
        t.push(vec!["F".into(), x.into(), emp_f.eval(x).into(), fh.eval(x).into(), ft.eval(x).into()]);
    }
    let smax = ses.iter().cloned().fold(0.0, f64::max);
    let half = G_GRID_HALF * fl.gamma.tau.abs().max(cl.gamma.tau.abs()).max(smax);
    let (lo, hi) =
        effects.iter().fold((fl.gamma.theta - half, fl.gamma.theta + half), |(lo, hi), &e| (lo.min(e), hi.max(e)));
    let grid: Vec<f64> = (0..G_GRID_POINTS).map(|k| lo + (hi - lo) * k as f64 / (G_GRID_POINTS - 1) as f64).collect();
    let gh = g_hat(data, &fl, &grid)?;
    let gt = g_tilde_cdf(data, &cl.gamma, &grid)?;
    for (k, &x) in grid.iter().enumerate() {
        t.push(vec!["G".into(), x.into(), emp_g.eval(x).into(), gh[k].into(), gt[k].into()]);
    }
    Ok(t)
}

fn hypothesis_name(h: Hypothesis) -> &'static str {
    match h {
        Hypothesis::H01 => "H01",
        Hypothesis::H02 => "H02",
        Hypothesis::H03 => "H03",
        Hypothesis::H04 => "H04",
    }
}

fn push_sorted(t: &mut Table, hypothesis: &str, statistic: &str, mut v: Vec<f64>, reference: impl Fn(f64) -> f64) {
    v.sort_by(f64::total_cmp);
    let m = v.len() as f64;
    for (i, x) in v.into_iter().enumerate() {
        let q = reference((i as f64 + 0.5) / m);
        t.push(vec![hypothesis.into(), statistic.into(), Cell::Int(i as i64 + 1), x.into(), q.into()]);
    }
}

/// Sorted statistics with reference quantiles at `(i - 1/2)/m`: N(0, 1) for
/// the sign-root LR and Wald statistics, χ²₇ for the full LR statistic.
pub fn qq_table(q: &QqTable) -> Table {
    let mut t = Table::new(&["hypothesis", "statistic", "rank", "value", "reference"]);
    for h in Hypothesis::ALL {
        push_sorted(&mut t, hypothesis_name(h), "lr_signroot", q.lr(h), std_normal_quantile);
        push_sorted(&mut t, hypothesis_name(h), "wald", q.wald(h), std_normal_quantile);
    }
    let r: Vec<f64> = q.lr_truth.iter().map(|&(_, v)| v).collect();
    push_sorted(&mut t, "all", "lr_full", r, |p| chi2_quantile(7.0, p));
    t
}

pub fn qq(cfg: &SimConfig) -> CliResult<Table> {
    Ok(qq_table(&qq_stats(cfg)?))
}
